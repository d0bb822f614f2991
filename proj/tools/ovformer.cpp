#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ovformer/config.hpp"
#include "ovformer/datasets.hpp"
#include "ovformer/errors.hpp"
#include "ovformer/evaluation.hpp"
#include "ovformer/inference.hpp"
#include "ovformer/log.hpp"
#include "ovformer/losses.hpp"
#include "ovformer/model.hpp"
#include "ovformer/textbank.hpp"
#include "ovformer/threads.hpp"
#include "ovformer/training.hpp"

namespace fs = std::filesystem;
using namespace ovf;

namespace {

// Config-file-first key resolution: defaults < preset < file < flags. Every
// key is also exposed as a --flag so --help lists the full set with
// defaults.
class KeySet {
public:
    void add(const std::string& name, const std::string& def, const std::string& help) {
        keys_.push_back({name, def, help});
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path_, "key=value config file (# comments; unknown keys are errors)");
        for (const auto& k : keys_) {
            auto* opt = cmd->add_option(
                "--" + k.name, [this, name = k.name](const std::vector<std::string>& vals) {
                    flag_values_[name] = vals.back();
                    return true;
                },
                k.help + " [default: " + (k.def.empty() ? "\"\"" : k.def) + "]");
            opt->type_name("VAL");
        }
    }

    void resolve() {
        std::set<std::string> allowed;
        for (const auto& k : keys_) {
            allowed.insert(k.name);
            values_[k.name] = k.def;
        }
        std::map<std::string, std::string> file_kv;
        if (!config_path_.empty()) file_kv = parse_config_file(config_path_, allowed);

        std::string preset;
        if (allowed.count("preset")) {
            if (file_kv.count("preset")) preset = file_kv["preset"];
            if (flag_values_.count("preset")) preset = flag_values_["preset"];
        }
        if (!preset.empty()) {
            for (const auto& [k, v] : named_preset(preset))
                if (allowed.count(k)) values_[k] = v;
        }
        for (const auto& [k, v] : file_kv) values_[k] = v;
        for (const auto& [k, v] : flag_values_) values_[k] = v;
    }

    const std::string& str(const std::string& key) const { return values_.at(key); }

    std::string required(const std::string& key) const {
        const std::string& v = values_.at(key);
        if (v.empty()) throw UsageError("missing required key '" + key + "'");
        return v;
    }

    int num(const std::string& key) const {
        try {
            return std::stoi(values_.at(key));
        } catch (const std::exception&) {
            throw UsageError("key '" + key + "': expected integer, got '" + values_.at(key) + "'");
        }
    }

    uint64_t u64(const std::string& key) const {
        try {
            return std::stoull(values_.at(key));
        } catch (const std::exception&) {
            throw UsageError("key '" + key + "': expected unsigned integer, got '" + values_.at(key) + "'");
        }
    }

    double real(const std::string& key) const {
        try {
            return std::stod(values_.at(key));
        } catch (const std::exception&) {
            throw UsageError("key '" + key + "': expected number, got '" + values_.at(key) + "'");
        }
    }

    bool flag(const std::string& key) const {
        const std::string& v = values_.at(key);
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no" || v.empty()) return false;
        throw UsageError("key '" + key + "': expected boolean, got '" + v + "'");
    }

private:
    struct Key {
        std::string name, def, help;
    };
    std::vector<Key> keys_;
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> flag_values_;
    std::string config_path_;
};

int resolve_threads(int requested) { return requested > 0 ? requested : default_threads(); }

std::vector<double> parse_grid(const std::string& csv) {
    std::vector<double> grid;
    std::string cur;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!cur.empty()) grid.push_back(std::stod(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    return grid;
}

void add_model_keys(KeySet& ks) {
    ks.add("D", "64", "model width (divisible by H)");
    ks.add("H", "4", "attention heads");
    ks.add("M", "4", "pyramid levels");
    ks.add("ffn_mult", "4", "FFN expansion factor");
    ks.add("head_layers", "2", "conv layers per detection head");
    ks.add("tau", "10.0", "initial similarity temperature");
    ks.add("late_fusion_only", "0", "ablation: text enters only at the classification head");
}

void add_train_keys(KeySet& ks, const char* vocab_default) {
    ks.add("preset", "", "named preset: stage1 | thumos-ft | anet-ft");
    ks.add("epochs", "10", "training epochs");
    ks.add("lr", "1e-3", "peak learning rate");
    ks.add("warmup_epochs", "2", "linear warmup epochs");
    ks.add("batch_size", "8", "videos per optimizer step");
    ks.add("seed", "0", "RNG seed");
    ks.add("lambda", "1.0", "regression loss weight");
    ks.add("freeze", "none", "freeze component: none | enc | dec");
    ks.add("grad_clip", "1.0", "global gradient-norm clip (<=0 disables)");
    ks.add("active_vocab", vocab_default, "vocabulary role this stage trains on");
    ks.add("alpha", "0.25", "focal alpha");
    ks.add("gamma", "2.0", "focal gamma");
    ks.add("center_ratio", "0.5", "central fraction eligible for positives");
    ks.add("max_seq_len", "0", "window length (0: use sequences as stored)");
    ks.add("data", "", "dataset manifest path");
    ks.add("vocab", "", "vocabulary file path");
    ks.add("table", "", "aggregated embedding table path");
    ks.add("out", "out", "output directory");
    ks.add("threads", "0", "worker threads (0: hardware)");
}

TrainConfig make_train_config(const KeySet& ks, int stage) {
    TrainConfig t;
    t.stage = stage;
    t.epochs = ks.num("epochs");
    t.lr = ks.real("lr");
    t.warmup_epochs = ks.num("warmup_epochs");
    t.batch_size = ks.num("batch_size");
    t.seed = ks.u64("seed");
    t.lambda = ks.real("lambda");
    t.freeze = parse_freeze(ks.str("freeze"));
    t.grad_clip = ks.real("grad_clip");
    t.active_vocab = ks.str("active_vocab");
    t.alpha = ks.real("alpha");
    t.gamma = ks.real("gamma");
    t.center_ratio = ks.real("center_ratio");
    t.max_seq_len = ks.num("max_seq_len");
    t.threads = resolve_threads(ks.num("threads"));
    return t;
}

std::vector<VideoFeatures> load_and_window(const std::string& manifest, int max_seq_len, int threads) {
    std::vector<VideoFeatures> raw = load_dataset(manifest, threads);
    if (max_seq_len <= 0) return raw;
    std::vector<VideoFeatures> out;
    for (const auto& v : raw) {
        auto windows = pad_or_window(v, max_seq_len);
        out.insert(out.end(), windows.begin(), windows.end());
    }
    return out;
}

int cmd_prompt(const std::string& classname) {
    std::cout << render_prompt(classname) << "\n";
    return 0;
}

int cmd_embed(const KeySet& ks) {
    Vocabulary vocab = Vocabulary::load(ks.required("vocab"));
    std::vector<DescriptionSet> sets;
    const int dim = ks.num("s");
    if (ks.flag("synthetic")) {
        for (const auto& c : vocab.classes)
            sets.push_back(synth_description_set(ks.u64("seed"), c, ks.num("e_per_class"), dim,
                                                 ks.real("desc_noise"), ks.num("concept_dim")));
        if (!ks.str("embeddings_out").empty()) save_description_sets(ks.str("embeddings_out"), sets, dim);
        if (!ks.str("sidecar_out").empty()) save_description_sidecar(ks.str("sidecar_out"), vocab, sets);
    } else {
        sets = load_description_sets(ks.required("descriptions"));
    }
    ClassEmbeddingTable table = build_table(vocab, sets, ks.flag("prenormalize"));
    table.save(ks.required("out"));
    std::cout << "ok embed classes=" << table.num_classes << " dim=" << table.dim << " out=" << ks.str("out")
              << "\n";
    return 0;
}

int cmd_gen(const KeySet& ks) {
    SynthConfig cfg;
    cfg.seed = ks.u64("seed");
    cfg.n_videos = ks.num("n_videos");
    cfg.t = ks.num("T");
    cfg.d_v = ks.num("d_v");
    cfg.d_f = ks.num("d_f");
    cfg.vocab = ks.required("vocab");
    cfg.table = ks.required("table");
    cfg.actions_per_video = ks.num("actions_per_video");
    cfg.min_len = ks.num("min_len");
    cfg.max_len = ks.num("max_len");
    cfg.snr = ks.real("snr");
    cfg.snippet_rank = ks.num("snippet_rank");
    Vocabulary vocab = Vocabulary::load(cfg.vocab);
    ClassEmbeddingTable table = ClassEmbeddingTable::load(cfg.table);
    const std::string out_dir = ks.required("out");
    DatasetManifest m = synth_generate(cfg, vocab, table, out_dir, ks.str("name"), ks.str("role"),
                                       resolve_threads(ks.num("threads")));
    const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
    m.save(manifest_path);
    size_t anns = 0;
    for (const auto& v : m.videos) anns += v.annotations.size();
    std::cout << "ok gen videos=" << m.videos.size() << " annotations=" << anns << " manifest=" << manifest_path
              << "\n";
    return 0;
}

ModelConfig model_config_from_keys(const KeySet& ks, const ClassEmbeddingTable& table,
                                   const std::vector<VideoFeatures>& data) {
    ModelConfig m;
    m.d = ks.num("D");
    m.h = ks.num("H");
    m.m = ks.num("M");
    m.ffn_mult = ks.num("ffn_mult");
    m.head_layers = ks.num("head_layers");
    m.tau_init = ks.real("tau");
    m.late_fusion_only = ks.flag("late_fusion_only");
    m.s = table.dim;
    if (data.empty()) throw DataError("dataset is empty");
    m.d_v = data.front().snippet.cols();
    m.d_f = data.front().frame.cols();
    m.validate();
    return m;
}

int cmd_train(const KeySet& ks) {
    TrainConfig tcfg = make_train_config(ks, 1);
    Vocabulary vocab = Vocabulary::load(ks.required("vocab"));
    ClassEmbeddingTable table = ClassEmbeddingTable::load(ks.required("table"));
    auto data = load_and_window(ks.required("data"), tcfg.max_seq_len, tcfg.threads);
    ModelConfig mcfg = model_config_from_keys(ks, table, data);
    TrainResult res = train_stage1(data, table, vocab, mcfg, tcfg, ks.required("out"));
    write_train_report(res.report, (fs::path(ks.str("out")) / "train_report").string());
    std::cout << "ok train epochs=" << res.report.epochs.size() << " final_loss="
              << (res.report.epochs.empty() ? 0.0 : res.report.epochs.back().total)
              << " checkpoint=" << res.report.final_checkpoint << "\n";
    return 0;
}

int cmd_finetune(const KeySet& ks) {
    TrainConfig tcfg = make_train_config(ks, 2);
    Vocabulary vocab = Vocabulary::load(ks.required("vocab"));
    ClassEmbeddingTable table = ClassEmbeddingTable::load(ks.required("table"));
    auto data = load_and_window(ks.required("data"), tcfg.max_seq_len, tcfg.threads);
    Checkpoint init = load_checkpoint(ks.required("init"));
    TrainResult res = finetune_stage2(init, data, table, vocab, tcfg, ks.required("out"));
    write_train_report(res.report, (fs::path(ks.str("out")) / "train_report").string());
    std::cout << "ok finetune epochs=" << res.report.epochs.size() << " final_loss="
              << (res.report.epochs.empty() ? 0.0 : res.report.epochs.back().total)
              << " checkpoint=" << res.report.final_checkpoint << "\n";
    return 0;
}

int cmd_predict(const KeySet& ks) {
    const int threads = resolve_threads(ks.num("threads"));
    const SplitFilter filter = parse_split_filter(ks.str("split"));
    DecodeConfig dcfg;
    dcfg.score_thresh = ks.real("score_thresh");
    dcfg.pre_nms_topk = ks.num("pre_nms_topk");
    if (!(dcfg.score_thresh > 0.0 && dcfg.score_thresh < 1.0))
        throw UsageError("predict: score_thresh must be in (0,1)");
    const double nms_thresh = ks.real("nms_thresh");
    if (!(nms_thresh > 0.0 && nms_thresh <= 1.0)) throw UsageError("predict: nms_thresh must be in (0,1]");
    const bool class_aware = ks.flag("class_aware");

    Checkpoint ck = load_checkpoint(ks.required("checkpoint"));
    Vocabulary vocab = Vocabulary::load(ks.required("vocab"));
    ClassEmbeddingTable table = ClassEmbeddingTable::load(ks.required("table"));
    SplitSelection sel = select_split(table, vocab, filter);

    std::vector<VideoFeatures> raw = load_dataset(ks.required("data"), threads);
    const int max_seq_len = ks.num("max_seq_len");

    std::vector<VideoPredictions> preds(raw.size());
    std::exception_ptr err;
    std::mutex err_mu;
    parallel_for(raw.size(), threads, [&](size_t i) {
        try {
            std::vector<Detection> merged;
            for (const auto& window : max_seq_len > 0 ? pad_or_window(raw[i], max_seq_len)
                                                      : std::vector<VideoFeatures>{raw[i]}) {
                ForwardOutputs out = forward(window, sel.table, ck.params, ck.config);
                auto dets = decode(out.logits, out.offsets, out.valid_len, sel.class_ids, window.valid_len, dcfg);
                for (auto& d : dets) {
                    d.start += window.origin_offset;
                    d.end += window.origin_offset;
                    merged.push_back(d);
                }
            }
            preds[i].video_id = raw[i].id;
            preds[i].detections = nms(std::move(merged), nms_thresh, class_aware);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
        }
    });
    if (err) std::rethrow_exception(err);

    save_predictions(ks.required("out"), preds);
    size_t total = 0;
    for (const auto& p : preds) total += p.detections.size();
    std::cout << "ok predict videos=" << preds.size() << " detections=" << total << " out=" << ks.str("out")
              << "\n";
    return 0;
}

int cmd_eval(const KeySet& ks) {
    std::vector<VideoPredictions> preds = load_predictions(ks.required("predictions"));
    DatasetManifest gt = DatasetManifest::load(ks.required("data"));
    Vocabulary vocab = Vocabulary::load(ks.required("vocab"));
    EvalConfig cfg;
    cfg.tiou_grid = parse_grid(ks.str("tiou"));
    cfg.top_k = ks.num("top_k");
    EvalReport report = evaluate(preds, gt, vocab, cfg);
    write_report(report, ks.required("out"));
    std::cout << "ok eval map_base=" << report.map_base << " map_novel=" << report.map_novel
              << " map_all=" << report.map_all << " out=" << ks.str("out") << ".json\n";
    return 0;
}

int cmd_report(const KeySet& ks) {
    EvalReport report = load_report_summary(ks.required("in"));
    write_report(report, ks.required("out"));
    std::cout << "ok report classes=" << report.per_class.size() << " out=" << ks.str("out") << ".json\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"open-vocabulary temporal action localization pipeline"};
    app.require_subcommand(1);

    std::string prompt_class;
    auto* prompt_cmd = app.add_subcommand("prompt", "print the description-query template for a class");
    prompt_cmd->add_option("--class", prompt_class, "class name")->required();

    KeySet embed_keys;
    embed_keys.add("vocab", "", "vocabulary file path");
    embed_keys.add("out", "table.ovzl", "aggregated table output path");
    embed_keys.add("seed", "0", "RNG seed for synthetic embeddings");
    embed_keys.add("s", "512", "embedding width");
    embed_keys.add("e_per_class", "10", "descriptions per class");
    embed_keys.add("desc_noise", "0.15", "per-description perturbation scale");
    embed_keys.add("concept_dim", "0", "synthetic concept-subspace rank (0: isotropic)");
    embed_keys.add("prenormalize", "0", "L2-normalize description vectors before averaging");
    embed_keys.add("synthetic", "0", "generate seeded embeddings instead of reading a file");
    embed_keys.add("descriptions", "", "per-description embedding file (OVTB) when not synthetic");
    embed_keys.add("embeddings_out", "", "optional OVTB output path (synthetic mode)");
    embed_keys.add("sidecar_out", "", "optional description-text sidecar output");
    auto* embed_cmd = app.add_subcommand("embed", "build the aggregated class-embedding table");
    embed_keys.attach(embed_cmd);

    KeySet gen_keys;
    gen_keys.add("seed", "0", "RNG seed");
    gen_keys.add("n_videos", "10", "number of videos");
    gen_keys.add("T", "128", "timesteps per video");
    gen_keys.add("d_v", "48", "snippet feature dim");
    gen_keys.add("d_f", "48", "frame feature dim");
    gen_keys.add("vocab", "", "vocabulary file path");
    gen_keys.add("table", "", "embedding table path");
    gen_keys.add("actions_per_video", "3", "planted actions per video");
    gen_keys.add("min_len", "8", "min action length (grid units)");
    gen_keys.add("max_len", "24", "max action length (grid units)");
    gen_keys.add("snr", "10", "signal-to-noise ratio");
    gen_keys.add("snippet_rank", "0", "rank of the snippet feature map (0: full)");
    gen_keys.add("out", "data", "output directory");
    gen_keys.add("name", "synth", "dataset name");
    gen_keys.add("role", "test", "dataset role: super | base | test");
    gen_keys.add("threads", "0", "worker threads (0: hardware)");
    auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset with planted actions");
    gen_keys.attach(gen_cmd);

    KeySet train_keys;
    add_train_keys(train_keys, "super");
    add_model_keys(train_keys);
    auto* train_cmd = app.add_subcommand("train", "stage-I training on the large-vocabulary dataset");
    train_keys.attach(train_cmd);

    KeySet ft_keys;
    add_train_keys(ft_keys, "base");
    ft_keys.add("init", "", "stage-I checkpoint to start from");
    auto* ft_cmd = app.add_subcommand("finetune", "stage-II finetuning on base classes");
    ft_keys.attach(ft_cmd);

    KeySet predict_keys;
    predict_keys.add("preset", "", "named preset: stage1 | thumos-ft | anet-ft");
    predict_keys.add("data", "", "dataset manifest path");
    predict_keys.add("vocab", "", "vocabulary file path");
    predict_keys.add("table", "", "embedding table path");
    predict_keys.add("checkpoint", "", "model checkpoint path");
    predict_keys.add("out", "predictions.json", "predictions output path");
    predict_keys.add("split", "all", "active vocabulary split: base | novel | all");
    predict_keys.add("score_thresh", "0.01", "per-candidate score threshold");
    predict_keys.add("pre_nms_topk", "200", "candidates kept per video before NMS");
    predict_keys.add("nms_thresh", "0.5", "NMS tIoU threshold");
    predict_keys.add("class_aware", "1", "suppress within the same class only");
    predict_keys.add("threads", "0", "worker threads (0: hardware)");
    predict_keys.add("max_seq_len", "0", "window length for long videos (0: whole video)");
    auto* predict_cmd = app.add_subcommand("predict", "decode detections with NMS");
    predict_keys.attach(predict_cmd);

    KeySet eval_keys;
    eval_keys.add("predictions", "", "predictions file path");
    eval_keys.add("data", "", "ground-truth manifest path");
    eval_keys.add("vocab", "", "vocabulary file path");
    eval_keys.add("out", "eval", "report base path (writes <out>.json etc.)");
    eval_keys.add("tiou", "0.5", "comma-separated tIoU thresholds");
    eval_keys.add("top_k", "0", "per-video detection cap (0: unlimited)");
    auto* eval_cmd = app.add_subcommand("eval", "split-aware mAP evaluation");
    eval_keys.attach(eval_cmd);

    KeySet report_keys;
    report_keys.add("in", "", "EvalReport JSON path");
    report_keys.add("out", "report", "report base path");
    auto* report_cmd = app.add_subcommand("report", "re-render report files from an EvalReport JSON");
    report_keys.attach(report_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (prompt_cmd->parsed()) return cmd_prompt(prompt_class);
        if (embed_cmd->parsed()) {
            embed_keys.resolve();
            return cmd_embed(embed_keys);
        }
        if (gen_cmd->parsed()) {
            gen_keys.resolve();
            return cmd_gen(gen_keys);
        }
        if (train_cmd->parsed()) {
            train_keys.resolve();
            return cmd_train(train_keys);
        }
        if (ft_cmd->parsed()) {
            ft_keys.resolve();
            return cmd_finetune(ft_keys);
        }
        if (predict_cmd->parsed()) {
            predict_keys.resolve();
            return cmd_predict(predict_keys);
        }
        if (eval_cmd->parsed()) {
            eval_keys.resolve();
            return cmd_eval(eval_keys);
        }
        if (report_cmd->parsed()) {
            report_keys.resolve();
            return cmd_report(report_keys);
        }
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
