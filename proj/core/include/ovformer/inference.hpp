#pragma once

#include <string>
#include <vector>

#include "ovformer/model.hpp"
#include "ovformer/tensor.hpp"

namespace ovf {

struct Detection {
    double start = 0.0;  // 1-based grid coordinates, start < end
    double end = 0.0;
    int class_id = 0;
    double score = 0.0;  // sigmoid of the class logit
};

struct DecodeConfig {
    double score_thresh = 0.01;
    int pre_nms_topk = 200;
};

// Turns per-level head outputs into scored segments. class_ids maps logit
// columns back to vocabulary ids; segments are clamped to [1, t_total].
std::vector<Detection> decode(const std::vector<Tensor>& logits, const std::vector<Tensor>& offsets,
                              const std::vector<int>& valid_lens, const std::vector<int>& class_ids, int t_total,
                              const DecodeConfig& cfg);

double temporal_iou(double s1, double e1, double s2, double e2);

// Greedy hard NMS: descending score (ties: smaller start, then smaller
// class id); a detection is suppressed when its tIoU with a kept one
// strictly exceeds thresh (same class only when class_aware).
std::vector<Detection> nms(std::vector<Detection> dets, double thresh, bool class_aware);

struct VideoPredictions {
    std::string video_id;
    std::vector<Detection> detections;
};

void save_predictions(const std::string& path, const std::vector<VideoPredictions>& preds);
std::vector<VideoPredictions> load_predictions(const std::string& path);

}  // namespace ovf
