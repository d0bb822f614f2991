#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ovformer/datasets.hpp"
#include "ovformer/inference.hpp"
#include "ovformer/textbank.hpp"

namespace ovf {

struct EvalConfig {
    std::vector<double> tiou_grid;  // strictly increasing, within (0, 1]
    int top_k = 0;                  // per-video score cap; 0 disables

    void validate() const;
};

struct ClassDetection {
    std::string video_id;
    double start = 0.0;
    double end = 0.0;
    double score = 0.0;
};

struct ClassGroundTruth {
    std::string video_id;
    double start = 0.0;
    double end = 0.0;
};

// AP for one class at one threshold: detections ranked by (score desc,
// start asc, video id asc), greedily matched to the highest-tIoU unmatched
// ground truth in the same video; all-point interpolation over the PR
// staircase. NaN when the class has no ground truth.
double average_precision(std::vector<ClassDetection> dets, const std::vector<ClassGroundTruth>& gts,
                         double tiou_thresh);

struct PerClassAp {
    int class_id = 0;
    Split split = Split::Base;
    int num_gt = 0;
    std::vector<double> ap;  // one per grid threshold; NaN when num_gt == 0
};

struct DetectionLabel {
    double tiou_thresh = 0.0;
    int class_id = 0;
    std::string video_id;
    double start = 0.0, end = 0.0;
    double score = 0.0;
    bool tp = false;
};

struct EvalReport {
    EvalConfig config;
    std::vector<PerClassAp> per_class;
    double map_base = std::nan("");
    double map_novel = std::nan("");
    double map_all = std::nan("");
    std::vector<DetectionLabel> labels;  // per-detection TP/FP audit trail
};

EvalReport evaluate(const std::vector<VideoPredictions>& predictions, const DatasetManifest& ground_truth,
                    const Vocabulary& vocab, const EvalConfig& cfg);

// Writes <base>.json (summary), <base>_classes.txt (per-class table) and
// <base>_audit.json (TP/FP labels).
void write_report(const EvalReport& report, const std::string& base_path);
EvalReport load_report_summary(const std::string& json_path);

}  // namespace ovf
