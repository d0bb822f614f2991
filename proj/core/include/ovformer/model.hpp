#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ovformer/datasets.hpp"
#include "ovformer/tensor.hpp"
#include "ovformer/textbank.hpp"

namespace ovf {

struct ModelConfig {
    int d = 64;   // model width; the frame stream is projected to the same width
    int h = 4;    // attention heads
    int m = 4;    // pyramid levels
    int s = 32;   // text embedding width
    int d_v = 0;  // snippet input dim
    int d_f = 0;  // frame input dim
    int ffn_mult = 4;
    int head_layers = 2;
    double tau_init = 10.0;
    bool late_fusion_only = false;

    int d_k() const { return d / h; }
    void validate() const;
};

// Raises ConfigError listing every field where `found` differs from `want`
// (in "name: expected X, found Y" form).
void check_config_compatible(const ModelConfig& want, const ModelConfig& found);

// Name-indexed learnable tensors. std::map keeps iteration deterministic for
// init, serialization and the optimizer.
struct ModelParams {
    std::map<std::string, Tensor> tensors;

    static ModelParams init(const ModelConfig& cfg, uint64_t seed);

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    ModelParams clone() const;  // copies values; gradients start empty
    size_t scalar_count() const;
};

// Encoder φ_ENC params are everything under proj_* / enc.*; the decoder
// φ_DEC heads live under head.*.
bool is_encoder_param(const std::string& name);

struct PyramidFeatures {
    std::vector<Tensor> levels;   // level m: T_m x D, T_{m+1} = ceil(T_m / 2)
    std::vector<int> valid_len;   // unpadded prefix per level
};

struct ForwardOutputs {
    std::vector<Tensor> logits;   // per level: T_m x A_active
    std::vector<Tensor> offsets;  // per level: T_m x 2, strictly positive
    std::vector<int> valid_len;
};

// Two stacked 1x1 conv + ReLU projections per stream; padded rows stay zero.
std::pair<Tensor, Tensor> project_inputs(const VideoFeatures& x, const ModelParams& p, const ModelConfig& cfg);

Tensor self_attend(const Tensor& z_v, const ModelParams& p, const ModelConfig& cfg, int level, int valid);
Tensor cross_attend(const Tensor& z_f, const Tensor& z_l, const ModelParams& p, const ModelConfig& cfg, int level,
                    int valid);
Tensor mixer_level(const Tensor& z_v, const Tensor& z_f, const Tensor& z_l, const ModelParams& p,
                   const ModelConfig& cfg, int level, int valid);

PyramidFeatures encode(const Tensor& z_v, const Tensor& z_f, const Tensor& z_l, const ModelParams& p,
                       const ModelConfig& cfg, int valid);

Tensor table_tensor(const ClassEmbeddingTable& table);
Tensor sinusoidal_encoding(int t, int d);

std::vector<Tensor> classify(const PyramidFeatures& z, const Tensor& z_l_active, const ModelParams& p,
                             const ModelConfig& cfg);
std::vector<Tensor> regress(const PyramidFeatures& z, const ModelParams& p, const ModelConfig& cfg);

ForwardOutputs forward(const VideoFeatures& x, const ClassEmbeddingTable& table_active, const ModelParams& p,
                       const ModelConfig& cfg);

// Checkpoint file ("OVCK"): config + seed + stage, then the name-indexed
// tensor table with float32 payloads.
struct Checkpoint {
    ModelConfig config;
    uint64_t seed = 0;
    int stage = 1;
    ModelParams params;
};

void save_checkpoint(const std::string& path, const ModelParams& params, const ModelConfig& cfg, uint64_t seed,
                     int stage);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ovf
