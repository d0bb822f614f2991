#include "ovformer/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ovformer/errors.hpp"

using json = nlohmann::ordered_json;

namespace ovf {

namespace {

bool rank_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.class_id < b.class_id;
}

}  // namespace

std::vector<Detection> decode(const std::vector<Tensor>& logits, const std::vector<Tensor>& offsets,
                              const std::vector<int>& valid_lens, const std::vector<int>& class_ids, int t_total,
                              const DecodeConfig& cfg) {
    if (!(cfg.score_thresh > 0.0 && cfg.score_thresh < 1.0)) throw UsageError("decode: score_thresh must be in (0,1)");
    if (cfg.pre_nms_topk < 1) throw UsageError("decode: pre_nms_topk must be >= 1");
    std::vector<Detection> out;
    for (size_t m = 0; m < logits.size(); ++m) {
        const double stride = static_cast<double>(1 << m);
        const auto& lg = logits[m];
        const auto& off = offsets[m];
        const int cols = lg.cols();
        if (static_cast<int>(class_ids.size()) != cols) throw UsageError("decode: class map size mismatch");
        for (int t = 0; t < std::min(lg.rows(), valid_lens[m]); ++t) {
            const double p = t * stride + 1.0;
            const double ds = off.data()[static_cast<size_t>(t) * 2];
            const double de = off.data()[static_cast<size_t>(t) * 2 + 1];
            const double start = std::max(1.0, p - stride * ds);
            const double end = std::min(static_cast<double>(t_total), p + stride * de);
            if (!(start < end)) continue;
            for (int a = 0; a < cols; ++a) {
                const double z = lg.data()[static_cast<size_t>(t) * cols + a];
                const double score = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                if (score < cfg.score_thresh) continue;
                out.push_back({start, end, class_ids[static_cast<size_t>(a)], score});
            }
        }
    }
    if (static_cast<int>(out.size()) > cfg.pre_nms_topk) {
        std::sort(out.begin(), out.end(), rank_before);
        out.resize(static_cast<size_t>(cfg.pre_nms_topk));
    }
    return out;
}

double temporal_iou(double s1, double e1, double s2, double e2) {
    if (!(s1 < e1) || !(s2 < e2)) throw UsageError("temporal_iou: degenerate segment");
    const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
    const double uni = (e1 - s1) + (e2 - s2) - inter;
    return inter / uni;
}

std::vector<Detection> nms(std::vector<Detection> dets, double thresh, bool class_aware) {
    if (!(thresh > 0.0 && thresh <= 1.0)) throw UsageError("nms: threshold must be in (0, 1]");
    std::sort(dets.begin(), dets.end(), rank_before);
    std::vector<Detection> kept;
    std::vector<uint8_t> removed(dets.size(), 0);
    for (size_t i = 0; i < dets.size(); ++i) {
        if (removed[i]) continue;
        kept.push_back(dets[i]);
        for (size_t j = i + 1; j < dets.size(); ++j) {
            if (removed[j]) continue;
            if (class_aware && dets[j].class_id != dets[i].class_id) continue;
            if (temporal_iou(dets[i].start, dets[i].end, dets[j].start, dets[j].end) > thresh) removed[j] = 1;
        }
    }
    return kept;
}

void save_predictions(const std::string& path, const std::vector<VideoPredictions>& preds) {
    json j = json::array();
    for (const auto& vp : preds) {
        json jv;
        jv["video_id"] = vp.video_id;
        jv["detections"] = json::array();
        for (const auto& d : vp.detections)
            jv["detections"].push_back(
                json{{"start", d.start}, {"end", d.end}, {"class_id", d.class_id}, {"score", d.score}});
        j.push_back(std::move(jv));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write predictions: " + path);
    out << j.dump(2) << '\n';
}

std::vector<VideoPredictions> load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open predictions: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("predictions " + path + ": " + e.what());
    }
    std::vector<VideoPredictions> out;
    try {
        for (const auto& jv : j) {
            VideoPredictions vp;
            vp.video_id = jv.at("video_id").get<std::string>();
            for (const auto& jd : jv.at("detections")) {
                Detection d;
                d.start = jd.at("start").get<double>();
                d.end = jd.at("end").get<double>();
                d.class_id = jd.at("class_id").get<int>();
                d.score = jd.at("score").get<double>();
                vp.detections.push_back(d);
            }
            out.push_back(std::move(vp));
        }
    } catch (const json::exception& e) {
        throw FormatError("predictions " + path + ": " + e.what());
    }
    return out;
}

}  // namespace ovf
