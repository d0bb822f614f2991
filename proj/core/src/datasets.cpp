#include "ovformer/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ovformer/errors.hpp"
#include "ovformer/rng.hpp"
#include "ovformer/serial.hpp"
#include "ovformer/threads.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace ovf {

namespace {

void validate_annotation(const ActionAnnotation& a, int t, const std::string& video_id) {
    if (!(a.start >= 1.0 && a.start < a.end && a.end <= static_cast<double>(t)))
        throw DataError("video '" + video_id + "': annotation [" + std::to_string(a.start) + ", " +
                        std::to_string(a.end) + "] violates 1 <= s < e <= T=" + std::to_string(t));
}

}  // namespace

std::string DatasetManifest::resolve(const std::string& manifest_path, const std::string& member) {
    fs::path p(member);
    if (p.is_absolute()) return member;
    return (fs::path(manifest_path).parent_path() / p).string();
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.vocab_path = j.at("vocab_path").get<std::string>();
        m.role = j.value("role", "test");
        for (const auto& jv : j.at("videos")) {
            ManifestVideo v;
            v.id = jv.at("id").get<std::string>();
            v.blob = jv.at("blob").get<std::string>();
            for (const auto& ja : jv.at("annotations")) {
                ActionAnnotation a;
                a.start = ja.at("s").get<double>();
                a.end = ja.at("e").get<double>();
                a.class_id = ja.at("class_id").get<int>();
                v.annotations.push_back(a);
            }
            m.videos.push_back(std::move(v));
        }
    } catch (const json::exception& e) {
        throw FormatError("manifest " + path + ": " + e.what());
    }
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    json j;
    j["name"] = name;
    j["vocab_path"] = vocab_path;
    j["role"] = role;
    j["videos"] = json::array();
    for (const auto& v : videos) {
        json jv;
        jv["id"] = v.id;
        jv["blob"] = v.blob;
        jv["annotations"] = json::array();
        for (const auto& a : v.annotations)
            jv["annotations"].push_back(json{{"s", a.start}, {"e", a.end}, {"class_id", a.class_id}});
        j["videos"].push_back(std::move(jv));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << j.dump(2) << '\n';
}

void save_feature_blob(const std::string& path, const Tensor& snippet, const Tensor& frame) {
    if (snippet.rows() != frame.rows()) throw DataError("snippet/frame length mismatch for blob " + path);
    BinaryWriter w(path);
    w.magic("OVFT");
    w.u32(1);
    w.u32(static_cast<uint32_t>(snippet.rows()));
    w.u32(static_cast<uint32_t>(snippet.cols()));
    w.u32(static_cast<uint32_t>(frame.cols()));
    w.f32s(snippet.data().data(), snippet.size());
    w.f32s(frame.data().data(), frame.size());
    w.close();
}

std::pair<Tensor, Tensor> load_feature_blob(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("OVFT");
    const uint32_t ver = r.u32();
    if (ver != 1) throw FormatError(path + ": unsupported OVFT version " + std::to_string(ver));
    const int t = static_cast<int>(r.u32());
    const int dv = static_cast<int>(r.u32());
    const int df = static_cast<int>(r.u32());
    if (t <= 0 || dv <= 0 || df <= 0) throw FormatError(path + ": bad blob header");
    std::vector<double> sv(static_cast<size_t>(t) * dv), fv(static_cast<size_t>(t) * df);
    r.f32s(sv.data(), sv.size());
    r.f32s(fv.data(), fv.size());
    r.expect_eof();
    return {Tensor::from({t, dv}, std::move(sv)), Tensor::from({t, df}, std::move(fv))};
}

std::vector<VideoFeatures> load_dataset(const std::string& manifest_path, int threads) {
    DatasetManifest m = DatasetManifest::load(manifest_path);
    std::vector<VideoFeatures> out(m.videos.size());
    std::exception_ptr err;
    std::mutex err_mu;
    parallel_for(m.videos.size(), threads, [&](size_t i) {
        try {
            const auto& mv = m.videos[i];
            VideoFeatures v;
            v.id = mv.id;
            v.origin_id = mv.id;
            auto [snip, frame] = load_feature_blob(DatasetManifest::resolve(manifest_path, mv.blob));
            v.snippet = snip;
            v.frame = frame;
            v.valid_len = v.snippet.rows();
            for (const auto& a : mv.annotations) {
                validate_annotation(a, v.valid_len, v.id);
                v.annotations.push_back(a);
            }
            out[i] = std::move(v);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
        }
    });
    if (err) std::rethrow_exception(err);
    return out;
}

std::vector<VideoFeatures> pad_or_window(const VideoFeatures& v, int max_len) {
    if (max_len < 1) throw UsageError("pad_or_window: max_len must be >= 1");
    const int t = v.length();
    const int dv = v.snippet.cols(), df = v.frame.cols();

    auto make_window = [&](int offset, int win_idx, int count) {
        VideoFeatures w;
        w.origin_id = v.origin_id.empty() ? v.id : v.origin_id;
        w.id = count == 1 ? v.id : v.id + "#w" + std::to_string(win_idx);
        w.origin_offset = offset;
        const int copy = std::min(max_len, t - offset);
        std::vector<double> sv(static_cast<size_t>(max_len) * dv, 0.0);
        std::vector<double> fv(static_cast<size_t>(max_len) * df, 0.0);
        std::copy_n(v.snippet.data().data() + static_cast<size_t>(offset) * dv, static_cast<size_t>(copy) * dv,
                    sv.data());
        std::copy_n(v.frame.data().data() + static_cast<size_t>(offset) * df, static_cast<size_t>(copy) * df,
                    fv.data());
        w.snippet = Tensor::from({max_len, dv}, std::move(sv));
        w.frame = Tensor::from({max_len, df}, std::move(fv));
        w.valid_len = copy;
        const double lo = static_cast<double>(offset) + 1.0;
        const double hi = static_cast<double>(offset + copy);
        for (const auto& a : v.annotations) {
            const double cs = std::max(a.start, lo);
            const double ce = std::min(a.end, hi);
            if (ce - cs < 1.0) continue;  // clipped remnant below one grid unit
            w.annotations.push_back({cs - offset, ce - offset, a.class_id});
        }
        return w;
    };

    if (t <= max_len) return {make_window(0, 0, 1)};

    const int stride = std::max(1, (3 * max_len) / 4);  // 25% overlap
    std::vector<int> offsets;
    for (int o = 0;; o += stride) {
        if (o + max_len >= t) {
            offsets.push_back(t - max_len);
            break;
        }
        offsets.push_back(o);
    }
    std::vector<VideoFeatures> out;
    for (size_t k = 0; k < offsets.size(); ++k)
        out.push_back(make_window(offsets[k], static_cast<int>(k), static_cast<int>(offsets.size())));
    return out;
}

void SynthConfig::validate() const {
    if (n_videos < 0) throw ConfigError("synth: n_videos must be >= 0");
    if (t < 1) throw ConfigError("synth: T must be >= 1");
    if (d_v < 1 || d_f < 1) throw ConfigError("synth: feature dims must be positive");
    if (min_len < 2) throw ConfigError("synth: min_len must be >= 2");
    if (max_len < min_len) throw ConfigError("synth: max_len must be >= min_len");
    if (snr <= 0.0) throw ConfigError("synth: snr must be positive");
    if (actions_per_video < 0) throw ConfigError("synth: actions_per_video must be >= 0");
    if (snippet_rank < 0) throw ConfigError("synth: snippet_rank must be >= 0");
    // Worst-case packing: every action spans max_len+1 grid cells (inclusive
    // bounds) with a 2-step gap between neighbours.
    const long need = static_cast<long>(actions_per_video) * (max_len + 1) +
                      2L * std::max(0, actions_per_video - 1);
    if (actions_per_video > 0 && need > t)
        throw ConfigError("synth: " + std::to_string(actions_per_video) + " actions of length <= " +
                          std::to_string(max_len) + " cannot fit in T=" + std::to_string(t));
}

std::vector<double> synth_feature_map(int feat_dim, int embed_dim, const char* stream_tag, int rank) {
    auto rng = make_rng(mix_seed(0xfea7ULL + hash64(stream_tag), static_cast<uint64_t>(feat_dim) * 131071u + embed_dim));
    std::normal_distribution<double> g(0.0, 1.0);
    if (rank <= 0 || rank >= std::min(feat_dim, embed_dim)) {
        std::vector<double> p(static_cast<size_t>(feat_dim) * embed_dim);
        for (double& x : p) x = g(rng);
        return p;
    }
    std::vector<double> a(static_cast<size_t>(feat_dim) * rank), b(static_cast<size_t>(rank) * embed_dim);
    for (double& x : a) x = g(rng);
    for (double& x : b) x = g(rng);
    // scale keeps per-component output variance ~1 for unit inputs
    const double scale = 1.0 / std::sqrt(static_cast<double>(rank));
    std::vector<double> p(static_cast<size_t>(feat_dim) * embed_dim, 0.0);
    for (int i = 0; i < feat_dim; ++i)
        for (int k = 0; k < rank; ++k) {
            const double aik = a[static_cast<size_t>(i) * rank + k] * scale;
            for (int j = 0; j < embed_dim; ++j)
                p[static_cast<size_t>(i) * embed_dim + j] += aik * b[static_cast<size_t>(k) * embed_dim + j];
        }
    return p;
}

std::vector<double> synth_background(int feat_dim, const char* stream_tag) {
    auto rng = make_rng(mix_seed(0xba5eULL + hash64(stream_tag), static_cast<uint64_t>(feat_dim)));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> b(feat_dim);
    for (double& x : b) x = 0.5 * g(rng);
    return b;
}

namespace {

void apply_map(const std::vector<double>& p, int feat_dim, const double* z, int embed_dim, double* out) {
    for (int i = 0; i < feat_dim; ++i) {
        double acc = 0.0;
        const double* row = p.data() + static_cast<size_t>(i) * embed_dim;
        for (int j = 0; j < embed_dim; ++j) acc += row[j] * z[j];
        out[i] = acc;
    }
}

}  // namespace

DatasetManifest synth_generate(const SynthConfig& cfg, const Vocabulary& vocab, const ClassEmbeddingTable& table,
                               const std::string& out_dir, const std::string& name, const std::string& role,
                               int threads) {
    cfg.validate();
    if (static_cast<int>(vocab.size()) != table.num_classes)
        throw ConfigError("synth: vocabulary size " + std::to_string(vocab.size()) + " != table classes " +
                          std::to_string(table.num_classes));
    fs::create_directories(fs::path(out_dir) / "blobs");

    const auto map_v = synth_feature_map(cfg.d_v, table.dim, "snippet", cfg.snippet_rank);
    const auto map_f = synth_feature_map(cfg.d_f, table.dim, "frame");
    const auto bg_v = synth_background(cfg.d_v, "snippet");
    const auto bg_f = synth_background(cfg.d_f, "frame");

    DatasetManifest m;
    m.name = name;
    m.vocab_path = cfg.vocab;
    m.role = role;
    m.videos.resize(cfg.n_videos);

    std::exception_ptr err;
    std::mutex err_mu;
    parallel_for(static_cast<size_t>(cfg.n_videos), threads, [&](size_t vi) {
        try {
            auto rng = make_rng(mix_seed(cfg.seed, static_cast<uint64_t>(vi)));
            std::uniform_int_distribution<int> len_d(cfg.min_len, cfg.max_len);
            std::uniform_int_distribution<int> cls_d(0, static_cast<int>(vocab.size()) - 1);
            std::normal_distribution<double> g(0.0, 1.0);

            // Sample lengths, then scatter the leftover room into gaps.
            std::vector<int> lens(cfg.actions_per_video);
            for (int& l : lens) l = len_d(rng);
            int occupied = 0;
            for (int l : lens) occupied += l + 1;  // [s, e] covers len+1 cells
            const int min_gaps = 2 * std::max(0, cfg.actions_per_video - 1);
            int freedom = cfg.t - occupied - min_gaps;
            std::vector<int> gaps(cfg.actions_per_video + 1, 0);
            for (int i = 1; i + 1 < static_cast<int>(gaps.size()); ++i) gaps[i] = 2;
            for (int r = 0; r < freedom; ++r) {
                std::uniform_int_distribution<int> gd(0, static_cast<int>(gaps.size()) - 1);
                gaps[gd(rng)] += 1;
            }

            std::vector<ActionAnnotation> anns;
            int cursor = 1;  // 1-based grid
            for (int i = 0; i < cfg.actions_per_video; ++i) {
                cursor += gaps[i];
                ActionAnnotation a;
                a.start = cursor;
                a.end = cursor + lens[i];
                a.class_id = cls_d(rng);
                anns.push_back(a);
                cursor += lens[i] + 1;
            }

            std::vector<double> sig_v(static_cast<size_t>(cfg.t) * cfg.d_v);
            std::vector<double> sig_f(static_cast<size_t>(cfg.t) * cfg.d_f);
            for (int t = 0; t < cfg.t; ++t) {
                std::copy(bg_v.begin(), bg_v.end(), sig_v.data() + static_cast<size_t>(t) * cfg.d_v);
                std::copy(bg_f.begin(), bg_f.end(), sig_f.data() + static_cast<size_t>(t) * cfg.d_f);
            }
            std::vector<double> proto_v(cfg.d_v), proto_f(cfg.d_f);
            for (const auto& a : anns) {
                apply_map(map_v, cfg.d_v, table.row(a.class_id), table.dim, proto_v.data());
                apply_map(map_f, cfg.d_f, table.row(a.class_id), table.dim, proto_f.data());
                for (int t = static_cast<int>(a.start); t <= static_cast<int>(a.end); ++t) {
                    std::copy(proto_v.begin(), proto_v.end(), sig_v.data() + static_cast<size_t>(t - 1) * cfg.d_v);
                    std::copy(proto_f.begin(), proto_f.end(), sig_f.data() + static_cast<size_t>(t - 1) * cfg.d_f);
                }
            }

            // Snippet stream: temporal box smoothing (width 5), then noise.
            std::vector<double> sm_v(sig_v.size(), 0.0);
            const int w = 2;
            for (int t = 0; t < cfg.t; ++t) {
                const int lo = std::max(0, t - w), hi = std::min(cfg.t - 1, t + w);
                const double inv = 1.0 / (hi - lo + 1);
                double* dst = sm_v.data() + static_cast<size_t>(t) * cfg.d_v;
                for (int u = lo; u <= hi; ++u) {
                    const double* src = sig_v.data() + static_cast<size_t>(u) * cfg.d_v;
                    for (int c = 0; c < cfg.d_v; ++c) dst[c] += src[c] * inv;
                }
            }

            const double noise = std::isinf(cfg.snr) ? 0.0 : 1.0 / cfg.snr;
            for (double& x : sm_v) x += noise * g(rng);
            for (double& x : sig_f) x += noise * g(rng);
            // f32 snap so the written blob equals what a reader sees.
            for (double& x : sm_v) x = static_cast<double>(static_cast<float>(x));
            for (double& x : sig_f) x = static_cast<double>(static_cast<float>(x));

            std::string vid = "v" + std::to_string(vi);
            std::string blob_rel = "blobs/" + vid + ".ovft";
            save_feature_blob((fs::path(out_dir) / blob_rel).string(), Tensor::from({cfg.t, cfg.d_v}, std::move(sm_v)),
                              Tensor::from({cfg.t, cfg.d_f}, std::move(sig_f)));

            ManifestVideo mv;
            mv.id = vid;
            mv.blob = blob_rel;
            mv.annotations = std::move(anns);
            m.videos[vi] = std::move(mv);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
        }
    });
    if (err) std::rethrow_exception(err);
    return m;
}

}  // namespace ovf
