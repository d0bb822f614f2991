#include "ovformer/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "ovformer/errors.hpp"
#include "ovformer/rng.hpp"
#include "ovformer/serial.hpp"

namespace ovf {

namespace {

constexpr double kNormEps = 1e-5;       // layer-norm epsilon
constexpr double kMaskLogit = -1e30;    // pre-softmax logit for masked keys
constexpr double kCosineGuard = 1e-24;  // keeps zero rows finite in cosine

std::string lvl(int level, const char* block) {
    return "enc.l" + std::to_string(level) + "." + block;
}

int ceil_half(int x) { return (x + 1) / 2; }

Tensor zero_pad_rows(const Tensor& x, int valid) {
    const int t = x.rows();
    if (valid >= t) return x;
    std::vector<double> m(static_cast<size_t>(t) * x.cols(), 0.0);
    std::fill_n(m.begin(), static_cast<size_t>(valid) * x.cols(), 1.0);
    return mul(x, Tensor::from(x.shape(), std::move(m)));
}

Tensor key_mask_bias(int t, int valid) {
    std::vector<double> b(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = valid; j < t; ++j) b[static_cast<size_t>(i) * t + j] = kMaskLogit;
    return Tensor::from({t, t}, std::move(b));
}

Tensor normalize_rows(const Tensor& x) {
    Tensor norms = sqrt_t(add_scalar(rows_sum(mul(x, x)), kCosineGuard));
    return div_bcast_col(x, norms);
}

Tensor attention(const Tensor& queries_src, const Tensor& keys_src, const ModelParams& p, const ModelConfig& cfg,
                 const std::string& prefix, const Tensor* logit_bias) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_k()));
    std::vector<Tensor> heads;
    heads.reserve(cfg.h);
    for (int h = 0; h < cfg.h; ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h);
        Tensor q = matmul(queries_src, p.at(hp + ".wq"));
        Tensor k = matmul(keys_src, p.at(hp + ".wk"));
        Tensor v = matmul(keys_src, p.at(hp + ".wv"));
        Tensor logits = mul_scalar(matmul(q, transpose(k)), scale);
        if (logit_bias != nullptr) logits = add(logits, *logit_bias);
        heads.push_back(matmul(softmax_rows(logits), v));
    }
    return matmul(concat_cols(heads), p.at(prefix + ".wo"));
}

Tensor conv_block(const Tensor& x, const ModelParams& p, const std::string& w, const std::string& b) {
    return relu(add_rowvec(conv1d(x, p.at(w), 1, Padding::Same), p.at(b)));
}

Tensor downsample(const Tensor& x, const ModelParams& p, const std::string& prefix) {
    Tensor y = conv1d_depthwise(x, p.at(prefix + ".dw"), 2);
    return add_rowvec(conv1d(y, p.at(prefix + ".pw"), 1, Padding::Same), p.at(prefix + ".b"));
}

std::map<std::string, Shape> expected_shapes(const ModelConfig& cfg) {
    std::map<std::string, Shape> sh;
    const int d = cfg.d, dk = cfg.d_k(), f = cfg.ffn_mult * cfg.d;
    sh["proj_v.c1.w"] = {1, cfg.d_v, d};
    sh["proj_v.c1.b"] = {d};
    sh["proj_v.c2.w"] = {1, d, d};
    sh["proj_v.c2.b"] = {d};
    sh["proj_f.c1.w"] = {1, cfg.d_f, d};
    sh["proj_f.c1.b"] = {d};
    sh["proj_f.c2.w"] = {1, d, d};
    sh["proj_f.c2.b"] = {d};
    for (int m = 0; m < cfg.m; ++m) {
        for (const char* blk : {"self", "cross"}) {
            const std::string b = lvl(m, blk);
            sh[b + ".norm.gain"] = {d};
            sh[b + ".norm.bias"] = {d};
            const int kdim = std::string(blk) == "self" ? d : cfg.s;
            for (int h = 0; h < cfg.h; ++h) {
                sh[b + ".h" + std::to_string(h) + ".wq"] = {d, dk};
                sh[b + ".h" + std::to_string(h) + ".wk"] = {kdim, dk};
                sh[b + ".h" + std::to_string(h) + ".wv"] = {kdim, dk};
            }
            sh[b + ".wo"] = {d, d};
        }
        const std::string fb = lvl(m, "ffn");
        sh[fb + ".norm.gain"] = {d};
        sh[fb + ".norm.bias"] = {d};
        sh[fb + ".w1"] = {d, f};
        sh[fb + ".b1"] = {f};
        sh[fb + ".w2"] = {f, d};
        sh[fb + ".b2"] = {d};
        if (m > 0) {
            for (const char* stream : {"down_v", "down_f"}) {
                const std::string db = lvl(m, stream);
                sh[db + ".dw"] = {3, d};
                sh[db + ".pw"] = {1, d, d};
                sh[db + ".b"] = {d};
            }
        }
    }
    for (const char* head : {"cls", "reg"}) {
        for (int i = 0; i < cfg.head_layers; ++i) {
            const std::string hb = std::string("head.") + head + ".c" + std::to_string(i);
            sh[hb + ".w"] = {3, d, d};
            sh[hb + ".b"] = {d};
        }
    }
    sh["head.cls.wl"] = {cfg.s, d};
    sh["head.cls.tau"] = {1};
    sh["head.cls.logit_bias"] = {1};
    sh["head.reg.out.w"] = {1, d, 2};
    sh["head.reg.out.b"] = {2};
    return sh;
}

int fan_in(const std::string& name, const Shape& shape) {
    if (shape.size() == 3) return shape[0] * shape[1];
    if (shape.size() == 2 && name.find(".dw") != std::string::npos) return shape[0];
    if (shape.size() == 2) return shape[0];
    return shape[0];
}

}  // namespace

void ModelConfig::validate() const {
    if (d < 1 || h < 1 || d % h != 0)
        throw ConfigError("model: width " + std::to_string(d) + " must be divisible by heads " + std::to_string(h));
    if (m < 1) throw ConfigError("model: need at least one pyramid level");
    if (s < 1) throw ConfigError("model: text embedding width must be positive");
    if (d_v < 1 || d_f < 1) throw ConfigError("model: input feature dims must be set");
    if (ffn_mult < 1 || head_layers < 1) throw ConfigError("model: ffn_mult and head_layers must be >= 1");
    if (tau_init <= 0.0) throw ConfigError("model: temperature must be positive");
}

void check_config_compatible(const ModelConfig& want, const ModelConfig& found) {
    std::ostringstream bad;
    auto chk = [&](const char* name, auto w, auto f) {
        if (w != f) bad << (bad.tellp() > 0 ? "; " : "") << name << ": expected " << w << ", found " << f;
    };
    chk("D", want.d, found.d);
    chk("H", want.h, found.h);
    chk("M", want.m, found.m);
    chk("s", want.s, found.s);
    chk("d_v", want.d_v, found.d_v);
    chk("d_f", want.d_f, found.d_f);
    chk("ffn_mult", want.ffn_mult, found.ffn_mult);
    chk("head_layers", want.head_layers, found.head_layers);
    chk("late_fusion_only", want.late_fusion_only, found.late_fusion_only);
    if (bad.tellp() > 0) throw ConfigError("checkpoint incompatible: " + bad.str());
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing model parameter '" + name + "'");
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing model parameter '" + name + "'");
    return it->second;
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, Tensor::param(t.shape(), t.data(), name));
    return out;
}

size_t ModelParams::scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
}

bool is_encoder_param(const std::string& name) {
    return name.rfind("proj_", 0) == 0 || name.rfind("enc.", 0) == 0;
}

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams p;
    for (const auto& [name, shape] : expected_shapes(cfg)) {
        std::vector<double> data(numel(shape), 0.0);
        const bool is_gain = name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
        const bool is_bias = name.find(".b") != std::string::npos &&
                             (name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") ||
                              name.ends_with(".bias"));
        if (name == "head.cls.tau") {
            data[0] = cfg.tau_init;
        } else if (name == "head.cls.logit_bias") {
            // pi = 0.01: decodes start out quiet, which keeps the focal loss
            // from being swamped by background positions early on.
            data[0] = -std::log(99.0);
        } else if (is_gain) {
            std::fill(data.begin(), data.end(), 1.0);
        } else if (!is_bias) {
            auto rng = make_rng(mix_seed(seed, name));
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(name, shape)));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (double& x : data) x = u(rng);
        }
        for (double& x : data) x = static_cast<double>(static_cast<float>(x));
        p.tensors.emplace(name, Tensor::param(shape, std::move(data), name));
    }
    return p;
}

std::pair<Tensor, Tensor> project_inputs(const VideoFeatures& x, const ModelParams& p, const ModelConfig& cfg) {
    if (x.snippet.cols() != cfg.d_v || x.frame.cols() != cfg.d_f)
        throw ConfigError("input dims (" + std::to_string(x.snippet.cols()) + ", " + std::to_string(x.frame.cols()) +
                          ") do not match model config (" + std::to_string(cfg.d_v) + ", " + std::to_string(cfg.d_f) +
                          ")");
    Tensor zv = conv_block(conv_block(x.snippet, p, "proj_v.c1.w", "proj_v.c1.b"), p, "proj_v.c2.w", "proj_v.c2.b");
    Tensor zf = conv_block(conv_block(x.frame, p, "proj_f.c1.w", "proj_f.c1.b"), p, "proj_f.c2.w", "proj_f.c2.b");
    return {zero_pad_rows(zv, x.valid_len), zero_pad_rows(zf, x.valid_len)};
}

Tensor self_attend(const Tensor& z_v, const ModelParams& p, const ModelConfig& cfg, int level, int valid) {
    const std::string prefix = lvl(level, "self");
    Tensor h = layer_norm(z_v, p.at(prefix + ".norm.gain"), p.at(prefix + ".norm.bias"), kNormEps);
    Tensor bias;
    const Tensor* bias_ptr = nullptr;
    if (valid < z_v.rows()) {
        bias = key_mask_bias(z_v.rows(), valid);
        bias_ptr = &bias;
    }
    Tensor out = add(z_v, attention(h, h, p, cfg, prefix, bias_ptr));
    return zero_pad_rows(out, valid);
}

Tensor cross_attend(const Tensor& z_f, const Tensor& z_l, const ModelParams& p, const ModelConfig& cfg, int level,
                    int valid) {
    if (z_l.rows() < 1) throw UsageError("cross_attend: class table is empty");
    const std::string prefix = lvl(level, "cross");
    Tensor h = layer_norm(z_f, p.at(prefix + ".norm.gain"), p.at(prefix + ".norm.bias"), kNormEps);
    Tensor out = add(z_f, attention(h, z_l, p, cfg, prefix, nullptr));
    return zero_pad_rows(out, valid);
}

Tensor mixer_level(const Tensor& z_v, const Tensor& z_f, const Tensor& z_l, const ModelParams& p,
                   const ModelConfig& cfg, int level, int valid) {
    if (z_v.rows() != z_f.rows()) throw DataError("mixer_level: stream lengths differ");
    Tensor zv2 = self_attend(z_v, p, cfg, level, valid);
    Tensor y = cfg.late_fusion_only ? zv2 : add(cross_attend(z_f, z_l, p, cfg, level, valid), zv2);
    const std::string fb = lvl(level, "ffn");
    Tensor h = layer_norm(y, p.at(fb + ".norm.gain"), p.at(fb + ".norm.bias"), kNormEps);
    Tensor ffn = add_rowvec(matmul(relu(add_rowvec(matmul(h, p.at(fb + ".w1")), p.at(fb + ".b1"))), p.at(fb + ".w2")),
                            p.at(fb + ".b2"));
    return zero_pad_rows(add(y, ffn), valid);
}

Tensor sinusoidal_encoding(int t, int d) {
    std::vector<double> pe(static_cast<size_t>(t) * d, 0.0);
    for (int pos = 0; pos < t; ++pos) {
        for (int i = 0; i < d; i += 2) {
            const double rate = std::pow(10000.0, static_cast<double>(i) / d);
            pe[static_cast<size_t>(pos) * d + i] = std::sin(pos / rate);
            if (i + 1 < d) pe[static_cast<size_t>(pos) * d + i + 1] = std::cos(pos / rate);
        }
    }
    return Tensor::from({t, d}, std::move(pe));
}

Tensor table_tensor(const ClassEmbeddingTable& table) {
    return Tensor::from({table.num_classes, table.dim}, table.z);
}

PyramidFeatures encode(const Tensor& z_v, const Tensor& z_f, const Tensor& z_l, const ModelParams& p,
                       const ModelConfig& cfg, int valid) {
    const int t = z_v.rows();
    if (t < (1 << (cfg.m - 1)))
        throw ConfigError("encode: sequence length " + std::to_string(t) + " cannot support " +
                          std::to_string(cfg.m) + " pyramid levels");
    Tensor pe = sinusoidal_encoding(t, cfg.d);
    Tensor v = zero_pad_rows(add(z_v, pe), valid);
    Tensor f = zero_pad_rows(add(z_f, pe), valid);

    PyramidFeatures out;
    int valid_m = valid;
    for (int m = 0; m < cfg.m; ++m) {
        if (m > 0) {
            valid_m = ceil_half(valid_m);
            v = zero_pad_rows(downsample(v, p, lvl(m, "down_v")), valid_m);
            f = zero_pad_rows(downsample(f, p, lvl(m, "down_f")), valid_m);
        }
        out.levels.push_back(mixer_level(v, f, z_l, p, cfg, m, valid_m));
        out.valid_len.push_back(valid_m);
    }
    return out;
}

namespace {

Tensor head_stack(const Tensor& x, const ModelParams& p, const ModelConfig& cfg, const char* head) {
    Tensor y = x;
    for (int i = 0; i < cfg.head_layers; ++i) {
        const std::string hb = std::string("head.") + head + ".c" + std::to_string(i);
        y = conv_block(y, p, hb + ".w", hb + ".b");
    }
    return y;
}

}  // namespace

std::vector<Tensor> classify(const PyramidFeatures& z, const Tensor& z_l_active, const ModelParams& p,
                             const ModelConfig& cfg) {
    Tensor u = normalize_rows(matmul(z_l_active, p.at("head.cls.wl")));
    Tensor ut = transpose(u);
    std::vector<Tensor> out;
    out.reserve(z.levels.size());
    for (const auto& level : z.levels) {
        Tensor feat = normalize_rows(head_stack(level, p, cfg, "cls"));
        Tensor cos = matmul(feat, ut);
        out.push_back(add_scalar_t(mul_scalar_t(cos, p.at("head.cls.tau")), p.at("head.cls.logit_bias")));
    }
    return out;
}

std::vector<Tensor> regress(const PyramidFeatures& z, const ModelParams& p, const ModelConfig& cfg) {
    std::vector<Tensor> out;
    out.reserve(z.levels.size());
    for (const auto& level : z.levels) {
        Tensor feat = head_stack(level, p, cfg, "reg");
        out.push_back(softplus(add_rowvec(conv1d(feat, p.at("head.reg.out.w"), 1, Padding::Same),
                                          p.at("head.reg.out.b"))));
    }
    return out;
}

ForwardOutputs forward(const VideoFeatures& x, const ClassEmbeddingTable& table_active, const ModelParams& p,
                       const ModelConfig& cfg) {
    if (table_active.dim != cfg.s)
        throw ConfigError("table dim " + std::to_string(table_active.dim) + " does not match model s=" +
                          std::to_string(cfg.s));
    auto [zv, zf] = project_inputs(x, p, cfg);
    Tensor zl = table_tensor(table_active);
    PyramidFeatures pyr = encode(zv, zf, zl, p, cfg, x.valid_len);
    ForwardOutputs out;
    out.logits = classify(pyr, zl, p, cfg);
    out.offsets = regress(pyr, p, cfg);
    out.valid_len = pyr.valid_len;
    return out;
}

void save_checkpoint(const std::string& path, const ModelParams& params, const ModelConfig& cfg, uint64_t seed,
                     int stage) {
    BinaryWriter w(path);
    w.magic("OVCK");
    w.u32(1);
    w.u32(static_cast<uint32_t>(cfg.d));
    w.u32(static_cast<uint32_t>(cfg.h));
    w.u32(static_cast<uint32_t>(cfg.m));
    w.u32(static_cast<uint32_t>(cfg.s));
    w.u32(static_cast<uint32_t>(cfg.d_v));
    w.u32(static_cast<uint32_t>(cfg.d_f));
    w.u32(static_cast<uint32_t>(cfg.ffn_mult));
    w.u32(static_cast<uint32_t>(cfg.head_layers));
    w.f32(static_cast<float>(cfg.tau_init));
    w.u32(cfg.late_fusion_only ? 1u : 0u);
    w.u32(static_cast<uint32_t>(seed & 0xffffffffu));
    w.u32(static_cast<uint32_t>(seed >> 32));
    w.u32(static_cast<uint32_t>(stage));
    w.u32(static_cast<uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.shape().size()));
        for (int e : t.shape()) w.u32(static_cast<uint32_t>(e));
        w.f32s(t.data().data(), t.size());
    }
    w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("OVCK");
    const uint32_t ver = r.u32();
    if (ver != 1) throw FormatError(path + ": unsupported OVCK version " + std::to_string(ver));
    Checkpoint ck;
    ck.config.d = static_cast<int>(r.u32());
    ck.config.h = static_cast<int>(r.u32());
    ck.config.m = static_cast<int>(r.u32());
    ck.config.s = static_cast<int>(r.u32());
    ck.config.d_v = static_cast<int>(r.u32());
    ck.config.d_f = static_cast<int>(r.u32());
    ck.config.ffn_mult = static_cast<int>(r.u32());
    ck.config.head_layers = static_cast<int>(r.u32());
    ck.config.tau_init = static_cast<double>(r.f32());
    ck.config.late_fusion_only = r.u32() != 0;
    const uint64_t lo = r.u32();
    const uint64_t hi = r.u32();
    ck.seed = lo | (hi << 32);
    ck.stage = static_cast<int>(r.u32());
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        if (rank == 0 || rank > 4) throw FormatError(path + ": tensor '" + name + "' has bad rank");
        Shape shape(rank);
        for (uint32_t k = 0; k < rank; ++k) shape[k] = static_cast<int>(r.u32());
        std::vector<double> data(numel(shape));
        r.f32s(data.data(), data.size());
        ck.params.tensors.emplace(name, Tensor::param(shape, std::move(data), name));
    }
    r.expect_eof();

    const auto want = expected_shapes(ck.config);
    if (want.size() != ck.params.tensors.size())
        throw FormatError(path + ": checkpoint holds " + std::to_string(ck.params.tensors.size()) +
                          " tensors, config implies " + std::to_string(want.size()));
    for (const auto& [name, shape] : want) {
        auto it = ck.params.tensors.find(name);
        if (it == ck.params.tensors.end()) throw FormatError(path + ": missing tensor '" + name + "'");
        if (it->second.shape() != shape)
            throw FormatError(path + ": tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(shape));
    }
    return ck;
}

}  // namespace ovf
