#include "ovformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ovformer/errors.hpp"
#include "ovformer/log.hpp"
#include "ovformer/rng.hpp"
#include "ovformer/threads.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace ovf {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kWeightDecay = 1e-4;

bool skip_decay(const std::string& name) { return name.find(".norm.") != std::string::npos; }

bool is_frozen(const std::string& name, Freeze freeze) {
    if (freeze == Freeze::Enc) return is_encoder_param(name);
    if (freeze == Freeze::Dec) return !is_encoder_param(name);
    return false;
}

}  // namespace

Freeze parse_freeze(const std::string& s) {
    if (s == "none") return Freeze::None;
    if (s == "enc") return Freeze::Enc;
    if (s == "dec") return Freeze::Dec;
    throw UsageError("unknown freeze mode '" + s + "' (expected none|enc|dec)");
}

const char* freeze_name(Freeze f) {
    switch (f) {
        case Freeze::None: return "none";
        case Freeze::Enc: return "enc";
        default: return "dec";
    }
}

void TrainConfig::validate(bool allow_zero_epochs) const {
    if (epochs < (allow_zero_epochs ? 0 : 1)) throw ConfigError("train: epochs must be >= 1");
    if (lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (epochs > 0 && warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be < epochs");
    if (warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("train: alpha must lie in (0, 1]");
    if (gamma < 0.0) throw ConfigError("train: gamma must be >= 0");
    if (active_vocab != "super" && active_vocab != "base")
        throw ConfigError("train: active_vocab must be super or base");
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    if (epoch < cfg.warmup_epochs) return cfg.lr * static_cast<double>(epoch + 1) / cfg.warmup_epochs;
    const int span = std::max(1, cfg.epochs - cfg.warmup_epochs);
    const double progress = static_cast<double>(epoch - cfg.warmup_epochs) / span;
    return cfg.lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

double clip_gradients(ModelParams& params, double clip) {
    double norm2 = 0.0;
    for (auto& [name, t] : params.tensors) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) norm2 += g * g;
    }
    const double norm = std::sqrt(norm2);
    if (clip > 0.0 && norm > clip) {
        const double scale = clip / norm;
        for (auto& [name, t] : params.tensors) {
            if (!t.has_grad()) continue;
            for (double& x : t.mut_grad()) x *= scale;
        }
    }
    return norm;
}

void optimizer_step(ModelParams& params, AdamState& state, double lr_t, double grad_clip, Freeze freeze) {
    for (const auto& [name, t] : params.tensors) {
        if (!t.has_grad()) continue;
        for (double g : t.grad())
            if (std::isnan(g)) throw NumericError("NaN gradient in tensor '" + name + "'");
    }
    clip_gradients(params, grad_clip);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
    for (auto& [name, t] : params.tensors) {
        if (is_frozen(name, freeze)) continue;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != t.size()) m.assign(t.size(), 0.0);
        if (v.size() != t.size()) v.assign(t.size(), 0.0);
        const bool decay = !skip_decay(name);
        auto& data = t.mut_data();
        const std::vector<double>& g = t.grad();
        for (size_t i = 0; i < data.size(); ++i) {
            const double gi = g.size() == data.size() ? g[i] : 0.0;
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double step = mhat / (std::sqrt(vhat) + kAdamEps);
            if (decay) step += kWeightDecay * data[i];
            data[i] -= lr_t * step;
        }
    }
}

namespace {

struct VideoLoss {
    double cls = 0.0, reg = 0.0, total = 0.0;
    std::map<std::string, std::vector<double>> grads;
};

VideoLoss video_pass(const VideoFeatures& video, const ClassEmbeddingTable& table, const ModelParams& master,
                     const ModelConfig& mcfg, const AssignConfig& acfg, const JointLossInputs& jin) {
    ModelParams local = master.clone();
    Tape tape;
    VideoLoss out;
    {
        TapeScope scope(tape);
        ForwardOutputs fwd = forward(video, table, local, mcfg);
        std::vector<int> lengths, valids;
        for (size_t m = 0; m < fwd.logits.size(); ++m) {
            lengths.push_back(fwd.logits[m].rows());
            valids.push_back(fwd.valid_len[m]);
        }
        TargetAssignment assignment = assign_targets(video.annotations, lengths, valids, acfg);
        JointLoss loss = joint_loss(fwd, assignment, jin);
        out.cls = loss.cls.item();
        out.reg = loss.reg.item();
        out.total = loss.total.item();
        tape.backward(loss.total);
    }
    for (auto& [name, t] : local.tensors)
        if (t.has_grad()) out.grads.emplace(name, t.grad());
    return out;
}

TrainResult run_training(ModelParams params, const std::vector<VideoFeatures>& data,
                         const ClassEmbeddingTable& table, const Vocabulary& vocab, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out_dir);

    if (static_cast<int>(vocab.size()) != table.num_classes)
        throw ConfigError("train: vocabulary size " + std::to_string(vocab.size()) + " != table classes " +
                          std::to_string(table.num_classes));
    for (const auto& v : data)
        for (const auto& a : v.annotations)
            if (!vocab.has_id(a.class_id))
                throw ConfigError("train: video '" + v.id + "' references class " + std::to_string(a.class_id) +
                                  " outside the active vocabulary");

    JointLossInputs jin;
    jin.lambda = tcfg.lambda;
    jin.alpha = tcfg.alpha;
    jin.gamma = tcfg.gamma;
    jin.num_columns = table.num_classes;
    for (int c = 0; c < table.num_classes; ++c) jin.class_to_col.emplace(c, c);
    const AssignConfig acfg = AssignConfig::defaults(mcfg.m, tcfg.center_ratio);

    TrainReport report;
    report.seed = tcfg.seed;

    AdamState state;
    double best_loss = std::numeric_limits<double>::infinity();
    std::string best_path;

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const double lr_t = lr_at_epoch(tcfg, epoch);
        auto rng = make_rng(mix_seed(tcfg.seed, 0x45504f43ULL + static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        EpochStats stats;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tcfg.batch_size)) {
            const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(tcfg.batch_size));
            std::vector<VideoLoss> losses(b1 - b0);
            std::exception_ptr err;
            std::mutex err_mu;
            parallel_for(b1 - b0, tcfg.threads, [&](size_t i) {
                try {
                    losses[i] = video_pass(data[order[b0 + i]], table, params, mcfg, acfg, jin);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
            if (err) std::rethrow_exception(err);

            // Reduce in index order so thread count never changes results.
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (auto& [name, t] : params.tensors) t.zero_grad();
            for (const auto& vl : losses) {
                stats.l_cls += vl.cls;
                stats.l_reg += vl.reg;
                stats.total += vl.total;
                for (const auto& [name, g] : vl.grads) {
                    auto& dst = params.at(name).mut_grad();
                    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * inv;
                }
            }
            optimizer_step(params, state, lr_t, tcfg.grad_clip, tcfg.freeze);
        }
        const double n = static_cast<double>(data.size());
        stats.l_cls /= n;
        stats.l_reg /= n;
        stats.total /= n;
        report.epochs.push_back(stats);

        const std::string ckpt = (fs::path(out_dir) / ("ckpt_epoch_" + std::to_string(epoch) + ".ovck")).string();
        save_checkpoint(ckpt, params, mcfg, tcfg.seed, tcfg.stage);
        if (stats.total < best_loss) {
            best_loss = stats.total;
            best_path = ckpt;
        }
        log_info("epoch " + std::to_string(epoch) + " lr " + std::to_string(lr_t) + " loss " +
                 std::to_string(stats.total) + " (cls " + std::to_string(stats.l_cls) + ", reg " +
                 std::to_string(stats.l_reg) + ")");
    }

    TrainResult result;
    if (best_path.empty()) {  // epochs == 0, or no finite epoch loss
        best_path = (fs::path(out_dir) / "ckpt_initial.ovck").string();
        save_checkpoint(best_path, params, mcfg, tcfg.seed, tcfg.stage);
    }
    // Return the checkpoint as written: downstream forwards then match a
    // later reload bit-for-bit despite the float32 payload.
    Checkpoint best = load_checkpoint(best_path);
    result.params = std::move(best.params);
    report.final_checkpoint = best_path;
    const std::string final_path = (fs::path(out_dir) / "best.ovck").string();
    save_checkpoint(final_path, result.params, mcfg, tcfg.seed, tcfg.stage);
    report.final_checkpoint = final_path;
    report.wall_seconds =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();
    result.report = std::move(report);
    return result;
}

}  // namespace

TrainResult train_stage1(const std::vector<VideoFeatures>& data, const ClassEmbeddingTable& table,
                         const Vocabulary& vocab, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const std::string& out_dir) {
    tcfg.validate(false);
    if (tcfg.active_vocab != "super") throw ConfigError("train_stage1: active_vocab must be super");
    ModelParams params = ModelParams::init(mcfg, tcfg.seed);
    return run_training(std::move(params), data, table, vocab, mcfg, tcfg, out_dir);
}

TrainResult finetune_stage2(const Checkpoint& init, const std::vector<VideoFeatures>& data,
                            const ClassEmbeddingTable& table, const Vocabulary& vocab, const TrainConfig& tcfg,
                            const std::string& out_dir) {
    tcfg.validate(true);
    if (tcfg.active_vocab != "base") throw ConfigError("finetune_stage2: active_vocab must be base");
    if (table.dim != init.config.s)
        throw ConfigError("finetune_stage2: table dim " + std::to_string(table.dim) + " != model s=" +
                          std::to_string(init.config.s));
    return run_training(init.params.clone(), data, table, vocab, init.config, tcfg, out_dir);
}

void write_train_report(const TrainReport& report, const std::string& base_path) {
    {
        std::ofstream out(base_path + ".log");
        if (!out) throw DataError("cannot write train log: " + base_path + ".log");
        for (size_t e = 0; e < report.epochs.size(); ++e)
            out << e << '\t' << report.epochs[e].l_cls << '\t' << report.epochs[e].l_reg << '\t'
                << report.epochs[e].total << '\n';
        out << "# wall_seconds " << report.wall_seconds << '\n';
    }
    json j;
    j["seed"] = report.seed;
    j["config_echo"] = report.config_echo;
    j["final_checkpoint"] = report.final_checkpoint;
    j["epochs"] = json::array();
    for (const auto& e : report.epochs)
        j["epochs"].push_back(json{{"l_cls", e.l_cls}, {"l_reg", e.l_reg}, {"total", e.total}});
    std::ofstream out(base_path + ".json");
    if (!out) throw DataError("cannot write train summary: " + base_path + ".json");
    out << j.dump(2) << '\n';
}

}  // namespace ovf
