#include "ovformer/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "ovformer/errors.hpp"

using json = nlohmann::ordered_json;

namespace ovf {

void EvalConfig::validate() const {
    if (tiou_grid.empty()) throw UsageError("eval: tIoU grid is empty");
    double prev = 0.0;
    for (double t : tiou_grid) {
        if (!(t > prev && t <= 1.0)) throw UsageError("eval: tIoU grid must be strictly increasing within (0, 1]");
        prev = t;
    }
    if (top_k < 0) throw UsageError("eval: top_k must be >= 0");
}

double average_precision(std::vector<ClassDetection> dets, const std::vector<ClassGroundTruth>& gts,
                         double tiou_thresh) {
    if (gts.empty()) return std::nan("");
    if (dets.empty()) return 0.0;
    std::sort(dets.begin(), dets.end(), [](const ClassDetection& a, const ClassDetection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.video_id < b.video_id;
    });
    std::map<std::string, std::vector<int>> gt_by_video;
    for (size_t i = 0; i < gts.size(); ++i) gt_by_video[gts[i].video_id].push_back(static_cast<int>(i));
    std::vector<uint8_t> matched(gts.size(), 0);

    std::vector<uint8_t> is_tp(dets.size(), 0);
    for (size_t d = 0; d < dets.size(); ++d) {
        auto it = gt_by_video.find(dets[d].video_id);
        if (it == gt_by_video.end()) continue;
        int best = -1;
        double best_iou = -1.0;
        for (int gi : it->second) {
            if (matched[static_cast<size_t>(gi)]) continue;
            const double iou = temporal_iou(dets[d].start, dets[d].end, gts[static_cast<size_t>(gi)].start,
                                            gts[static_cast<size_t>(gi)].end);
            if (iou > best_iou) {
                best_iou = iou;
                best = gi;
            }
        }
        if (best >= 0 && best_iou >= tiou_thresh) {
            is_tp[d] = 1;
            matched[static_cast<size_t>(best)] = 1;
        }
    }

    // PR staircase with all-point interpolation.
    const double n_gt = static_cast<double>(gts.size());
    std::vector<double> precision(dets.size()), recall(dets.size());
    int tp = 0;
    for (size_t d = 0; d < dets.size(); ++d) {
        tp += is_tp[d];
        precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
        recall[d] = static_cast<double>(tp) / n_gt;
    }
    for (size_t d = dets.size() - 1; d > 0; --d) precision[d - 1] = std::max(precision[d - 1], precision[d]);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (size_t d = 0; d < dets.size(); ++d) {
        ap += (recall[d] - prev_recall) * precision[d];
        prev_recall = recall[d];
    }
    return ap;
}

namespace {

double mean_over(const std::vector<double>& xs) {
    if (xs.empty()) return std::nan("");
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc / static_cast<double>(xs.size());
}

}  // namespace

EvalReport evaluate(const std::vector<VideoPredictions>& predictions, const DatasetManifest& ground_truth,
                    const Vocabulary& vocab, const EvalConfig& cfg) {
    cfg.validate();
    EvalReport report;
    report.config = cfg;

    // Bucket detections per class, honoring the optional per-video cap.
    std::map<int, std::vector<ClassDetection>> dets_by_class;
    for (const auto& vp : predictions) {
        std::vector<Detection> dets = vp.detections;
        if (cfg.top_k > 0 && static_cast<int>(dets.size()) > cfg.top_k) {
            std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.start != b.start) return a.start < b.start;
                return a.class_id < b.class_id;
            });
            dets.resize(static_cast<size_t>(cfg.top_k));
        }
        for (const auto& d : dets) {
            if (!vocab.has_id(d.class_id))
                throw DataError("predictions reference unknown class id " + std::to_string(d.class_id) +
                                " in video '" + vp.video_id + "'");
            dets_by_class[d.class_id].push_back({vp.video_id, d.start, d.end, d.score});
        }
    }
    std::map<int, std::vector<ClassGroundTruth>> gts_by_class;
    for (const auto& v : ground_truth.videos)
        for (const auto& a : v.annotations) gts_by_class[a.class_id].push_back({v.id, a.start, a.end});

    for (const auto& cls : vocab.classes) {
        PerClassAp pc;
        pc.class_id = cls.id;
        pc.split = cls.split;
        const auto git = gts_by_class.find(cls.id);
        pc.num_gt = git == gts_by_class.end() ? 0 : static_cast<int>(git->second.size());
        const auto dit = dets_by_class.find(cls.id);
        static const std::vector<ClassDetection> no_dets;
        static const std::vector<ClassGroundTruth> no_gts;
        const auto& dets = dit == dets_by_class.end() ? no_dets : dit->second;
        const auto& gts = git == gts_by_class.end() ? no_gts : git->second;
        for (double thresh : cfg.tiou_grid) pc.ap.push_back(average_precision(dets, gts, thresh));
        report.per_class.push_back(std::move(pc));
    }

    // Per-detection TP/FP audit labels (re-derived with the same matching).
    for (double thresh : cfg.tiou_grid) {
        for (const auto& [cid, dets_in] : dets_by_class) {
            std::vector<ClassDetection> dets = dets_in;
            std::sort(dets.begin(), dets.end(), [](const ClassDetection& a, const ClassDetection& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.start != b.start) return a.start < b.start;
                return a.video_id < b.video_id;
            });
            const auto git = gts_by_class.find(cid);
            std::vector<uint8_t> matched(git == gts_by_class.end() ? 0 : git->second.size(), 0);
            for (const auto& d : dets) {
                bool tp = false;
                if (git != gts_by_class.end()) {
                    int best = -1;
                    double best_iou = -1.0;
                    for (size_t gi = 0; gi < git->second.size(); ++gi) {
                        if (matched[gi] || git->second[gi].video_id != d.video_id) continue;
                        const double iou = temporal_iou(d.start, d.end, git->second[gi].start, git->second[gi].end);
                        if (iou > best_iou) {
                            best_iou = iou;
                            best = static_cast<int>(gi);
                        }
                    }
                    if (best >= 0 && best_iou >= thresh) {
                        matched[static_cast<size_t>(best)] = 1;
                        tp = true;
                    }
                }
                report.labels.push_back({thresh, cid, d.video_id, d.start, d.end, d.score, tp});
            }
        }
    }

    // mAP per split: class means (zero-GT classes excluded), then the mean
    // over thresholds. map_all is the class mean over base and novel
    // together, not the mean of the two split mAPs.
    const size_t n_thresh = cfg.tiou_grid.size();
    std::vector<double> base_means, novel_means, all_means;
    for (size_t ti = 0; ti < n_thresh; ++ti) {
        std::vector<double> base, novel, all;
        for (const auto& pc : report.per_class) {
            if (pc.num_gt == 0) continue;
            const double ap = pc.ap[ti];
            if (pc.split == Split::Base) base.push_back(ap);
            if (pc.split == Split::Novel) novel.push_back(ap);
            if (pc.split == Split::Base || pc.split == Split::Novel) all.push_back(ap);
        }
        base_means.push_back(mean_over(base));
        novel_means.push_back(mean_over(novel));
        all_means.push_back(mean_over(all));
    }
    auto grid_mean = [&](const std::vector<double>& xs) {
        std::vector<double> defined;
        for (double x : xs)
            if (!std::isnan(x)) defined.push_back(x);
        return defined.size() == xs.size() ? mean_over(defined) : std::nan("");
    };
    report.map_base = grid_mean(base_means);
    report.map_novel = grid_mean(novel_means);
    report.map_all = grid_mean(all_means);
    return report;
}

void write_report(const EvalReport& report, const std::string& base_path) {
    json j;
    j["config_echo"] = json{{"tiou_grid", report.config.tiou_grid}, {"top_k", report.config.top_k}};
    j["per_class"] = json::array();
    for (const auto& pc : report.per_class) {
        json jc;
        jc["class_id"] = pc.class_id;
        jc["split"] = split_name(pc.split);
        jc["num_gt"] = pc.num_gt;
        jc["ap_by_threshold"] = pc.ap;  // NaN serializes as null
        j["per_class"].push_back(std::move(jc));
    }
    j["map_base"] = report.map_base;
    j["map_novel"] = report.map_novel;
    j["map_all"] = report.map_all;
    {
        std::ofstream out(base_path + ".json");
        if (!out) throw DataError("cannot write report: " + base_path + ".json");
        out << j.dump(2) << '\n';
    }
    {
        std::ofstream out(base_path + "_classes.txt");
        if (!out) throw DataError("cannot write report: " + base_path + "_classes.txt");
        out << "class_id\tsplit\tnum_gt";
        for (double t : report.config.tiou_grid) out << "\tap@" << t;
        out << '\n';
        for (const auto& pc : report.per_class) {
            out << pc.class_id << '\t' << split_name(pc.split) << '\t' << pc.num_gt;
            for (double ap : pc.ap) {
                if (std::isnan(ap))
                    out << "\tnull";
                else
                    out << '\t' << ap;
            }
            out << '\n';
        }
    }
    {
        json ja = json::array();
        for (const auto& l : report.labels)
            ja.push_back(json{{"tiou_thresh", l.tiou_thresh},
                              {"class_id", l.class_id},
                              {"video_id", l.video_id},
                              {"start", l.start},
                              {"end", l.end},
                              {"score", l.score},
                              {"tp", l.tp}});
        std::ofstream out(base_path + "_audit.json");
        if (!out) throw DataError("cannot write report: " + base_path + "_audit.json");
        out << ja.dump(2) << '\n';
    }
}

EvalReport load_report_summary(const std::string& json_path) {
    std::ifstream in(json_path);
    if (!in) throw DataError("cannot open report: " + json_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("report " + json_path + ": " + e.what());
    }
    EvalReport r;
    try {
        for (const auto& t : j.at("config_echo").at("tiou_grid")) r.config.tiou_grid.push_back(t.get<double>());
        r.config.top_k = j.at("config_echo").at("top_k").get<int>();
        for (const auto& jc : j.at("per_class")) {
            PerClassAp pc;
            pc.class_id = jc.at("class_id").get<int>();
            pc.split = parse_split(jc.at("split").get<std::string>());
            pc.num_gt = jc.at("num_gt").get<int>();
            for (const auto& a : jc.at("ap_by_threshold"))
                pc.ap.push_back(a.is_null() ? std::nan("") : a.get<double>());
            r.per_class.push_back(std::move(pc));
        }
        auto num = [&](const char* key) {
            const auto& v = j.at(key);
            return v.is_null() ? std::nan("") : v.get<double>();
        };
        r.map_base = num("map_base");
        r.map_novel = num("map_novel");
        r.map_all = num("map_all");
    } catch (const json::exception& e) {
        throw FormatError("report " + json_path + ": " + e.what());
    }
    return r;
}

}  // namespace ovf
