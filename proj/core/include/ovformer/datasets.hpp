#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovformer/tensor.hpp"
#include "ovformer/textbank.hpp"

namespace ovf {

// Temporal bounds in 1-based feature-grid units: 1 <= s < e <= T. The
// manifest and predictions files use the same convention, so annotations are
// kept 1-based in memory; only array indexing converts (grid position of
// 0-based timestep t at stride 2^(m-1) is p = t * stride + 1).
struct ActionAnnotation {
    double start = 0.0;
    double end = 0.0;
    int class_id = 0;
};

struct VideoFeatures {
    std::string id;
    Tensor snippet;  // T x d_v
    Tensor frame;    // T x d_f
    std::vector<ActionAnnotation> annotations;
    int valid_len = 0;  // timesteps before zero padding (== T when unpadded)

    // Windowing provenance; detections are shifted by origin_offset before
    // the cross-window merge.
    std::string origin_id;
    int origin_offset = 0;

    int length() const { return snippet.rows(); }
};

struct ManifestVideo {
    std::string id;
    std::string blob;  // path, relative to the manifest directory unless absolute
    std::vector<ActionAnnotation> annotations;
};

struct DatasetManifest {
    std::string name;
    std::string vocab_path;
    std::string role = "test";  // super | base | test
    std::vector<ManifestVideo> videos;

    static DatasetManifest load(const std::string& path);
    void save(const std::string& path) const;

    // Resolves a possibly-relative member path against the manifest location.
    static std::string resolve(const std::string& manifest_path, const std::string& member);
};

void save_feature_blob(const std::string& path, const Tensor& snippet, const Tensor& frame);
// Returns (snippet, frame).
std::pair<Tensor, Tensor> load_feature_blob(const std::string& path);

// Loads and validates every video named by the manifest.
std::vector<VideoFeatures> load_dataset(const std::string& manifest_path, int threads = 1);

// Fixed-length windows: shorter inputs are zero-padded with a validity mask,
// longer ones split with 25% overlap; annotations are clipped per window and
// dropped when the clipped extent falls below one grid unit.
std::vector<VideoFeatures> pad_or_window(const VideoFeatures& v, int max_len);

struct SynthConfig {
    uint64_t seed = 0;
    int n_videos = 0;
    int t = 128;
    int d_v = 0;
    int d_f = 0;
    std::string vocab;  // vocabulary file path
    std::string table;  // aggregated embedding table path
    int actions_per_video = 1;
    int min_len = 2;
    int max_len = 8;
    double snr = 10.0;
    // Rank of the snippet-stream map (0: full). Motion-style features that
    // underdetermine the class leave the disambiguation to the frame stream.
    int snippet_rank = 0;

    void validate() const;
};

// The fixed linear maps from embedding space into feature space, plus the
// shared background prototype. Derived from constants and the dimensions
// only, so every dataset with matching dims shares them. rank > 0 factors
// the map through a rank-dimensional bottleneck (still a fixed linear map).
std::vector<double> synth_feature_map(int feat_dim, int embed_dim, const char* stream_tag, int rank = 0);
std::vector<double> synth_background(int feat_dim, const char* stream_tag);

// Writes blobs under <out_dir>/blobs/ and returns the manifest (not yet
// saved). Deterministic in cfg.seed, byte-for-byte.
DatasetManifest synth_generate(const SynthConfig& cfg, const Vocabulary& vocab, const ClassEmbeddingTable& table,
                               const std::string& out_dir, const std::string& name, const std::string& role,
                               int threads = 1);

}  // namespace ovf
