#pragma once

#include <array>
#include <unordered_map>
#include <vector>

#include "ovformer/datasets.hpp"
#include "ovformer/model.hpp"
#include "ovformer/tensor.hpp"

namespace ovf {

struct AssignConfig {
    double center_ratio = 0.5;
    // (lo, hi] bounds on the max regression offset per level, in stride
    // units; hi of the last level is unbounded.
    std::vector<std::pair<double, double>> level_ranges;

    // Geometric defaults: (0,4], (4,8], (8,16], ... with an open last bound.
    static AssignConfig defaults(int levels, double center_ratio = 0.5);
};

struct LevelAssignment {
    int length = 0;
    std::vector<uint8_t> positive;                 // per timestep
    std::vector<std::vector<int>> class_ids;       // class bits (vocabulary ids), multi-hot
    std::vector<std::array<double, 2>> reg_target; // (d_start, d_end) in stride units
    std::vector<int> matched;                      // annotation index, -1 for background
};

struct TargetAssignment {
    std::vector<LevelAssignment> levels;
    int num_positives = 0;
};

// Timestep t (0-based) at level m sits at grid position p = t * 2^m + 1. It
// is positive for an annotation when p falls inside the central
// center_ratio fraction of [s, e], strictly inside (s, e), and the max
// offset in stride units lies in the level's range. Overlaps resolve to the
// annotation with the smallest extent (ties: lower index) for the
// regression target; class bits are the union over eligible annotations.
TargetAssignment assign_targets(const std::vector<ActionAnnotation>& annotations,
                                const std::vector<int>& level_lengths, const std::vector<int>& valid_lens,
                                const AssignConfig& cfg);

// Per-element focal term on sigmoid probabilities, summed and divided by
// max(1, #positive rows). alpha == 1 disables the alpha weighting entirely.
Tensor focal_loss(const Tensor& logits, const std::vector<std::vector<uint8_t>>& targets, double alpha, double gamma);

// Unnormalized sum; callers divide by their own positive count.
Tensor focal_loss_sum(const Tensor& logits, const std::vector<std::vector<uint8_t>>& targets, double alpha,
                      double gamma, int valid_rows);

// 1 - IoU + squared normalized center distance between the segments
// [p - d_s, p + d_e] reconstructed from predicted and target offsets.
Tensor diou_loss(const Tensor& pred_offsets, double target_ds, double target_de, double anchor, double stride = 1.0);

struct JointLossInputs {
    double lambda = 1.0;
    double alpha = 0.25;
    double gamma = 2.0;
    // Maps vocabulary class id -> logit column (identity when the active
    // table is the whole vocabulary).
    std::unordered_map<int, int> class_to_col;
    int num_columns = 0;
};

struct JointLoss {
    Tensor total;
    Tensor cls;
    Tensor reg;
};

JointLoss joint_loss(const ForwardOutputs& outputs, const TargetAssignment& assignment, const JointLossInputs& in);

}  // namespace ovf
