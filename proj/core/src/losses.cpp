#include "ovformer/losses.hpp"

#include <algorithm>
#include <cmath>

#include "ovformer/errors.hpp"

namespace ovf {

AssignConfig AssignConfig::defaults(int levels, double center_ratio) {
    AssignConfig cfg;
    cfg.center_ratio = center_ratio;
    double lo = 0.0, hi = 4.0;
    for (int m = 0; m < levels; ++m) {
        const bool last = m == levels - 1;
        cfg.level_ranges.emplace_back(lo, last ? std::numeric_limits<double>::infinity() : hi);
        lo = hi;
        hi *= 2.0;
    }
    return cfg;
}

TargetAssignment assign_targets(const std::vector<ActionAnnotation>& annotations,
                                const std::vector<int>& level_lengths, const std::vector<int>& valid_lens,
                                const AssignConfig& cfg) {
    if (level_lengths.size() != valid_lens.size() || level_lengths.size() != cfg.level_ranges.size())
        throw UsageError("assign_targets: level counts disagree");
    for (size_t m = 1; m < cfg.level_ranges.size(); ++m)
        if (cfg.level_ranges[m].first < cfg.level_ranges[m - 1].second - 1e-12)
            throw UsageError("assign_targets: level_ranges must be increasing");

    TargetAssignment out;
    for (size_t m = 0; m < level_lengths.size(); ++m) {
        const double stride = static_cast<double>(1 << m);
        const auto [lo, hi] = cfg.level_ranges[m];
        LevelAssignment la;
        la.length = level_lengths[m];
        la.positive.assign(la.length, 0);
        la.class_ids.assign(la.length, {});
        la.reg_target.assign(la.length, {0.0, 0.0});
        la.matched.assign(la.length, -1);
        for (int t = 0; t < std::min(la.length, valid_lens[m]); ++t) {
            const double p = t * stride + 1.0;
            int best = -1;
            double best_extent = 0.0;
            for (size_t i = 0; i < annotations.size(); ++i) {
                const auto& a = annotations[i];
                if (!(p > a.start && p < a.end)) continue;
                const double center = 0.5 * (a.start + a.end);
                const double halfw = 0.5 * cfg.center_ratio * (a.end - a.start);
                if (std::fabs(p - center) > halfw) continue;
                const double max_off = std::max(p - a.start, a.end - p) / stride;
                if (!(max_off > lo && max_off <= hi)) continue;
                la.class_ids[t].push_back(a.class_id);
                const double extent = a.end - a.start;
                if (best < 0 || extent < best_extent) {
                    best = static_cast<int>(i);
                    best_extent = extent;
                }
            }
            if (best >= 0) {
                const auto& a = annotations[static_cast<size_t>(best)];
                la.positive[t] = 1;
                la.matched[t] = best;
                la.reg_target[t] = {(p - a.start) / stride, (a.end - p) / stride};
                auto& ids = la.class_ids[t];
                std::sort(ids.begin(), ids.end());
                ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
                ++out.num_positives;
            } else {
                la.class_ids[t].clear();
            }
        }
        out.levels.push_back(std::move(la));
    }
    return out;
}

namespace {

// Stable per-element focal term: with z_t = logit for positive targets and
// -logit for negatives, p_t = sigmoid(z_t), so
//   -log(p_t) = softplus(-z_t) and (1 - p_t) = sigmoid(-z_t).
Tensor focal_core(const Tensor& logits, const std::vector<double>& neg_sign, const std::vector<double>& weight,
                  double gamma) {
    Tensor nz = mul(logits, Tensor::from(logits.shape(), neg_sign));
    Tensor elems = mul(pow_const(sigmoid(nz), gamma), softplus(nz));
    return sum_all(mul(Tensor::from(logits.shape(), weight), elems));
}

}  // namespace

Tensor focal_loss_sum(const Tensor& logits, const std::vector<std::vector<uint8_t>>& targets, double alpha,
                      double gamma, int valid_rows) {
    const int rows = logits.rows(), cols = logits.cols();
    if (static_cast<int>(targets.size()) != rows) throw UsageError("focal_loss: target rows mismatch");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("focal_loss: alpha must lie in (0, 1]");
    if (gamma < 0.0) throw UsageError("focal_loss: gamma must be >= 0");
    std::vector<double> neg_sign(static_cast<size_t>(rows) * cols);
    std::vector<double> weight(static_cast<size_t>(rows) * cols);
    const bool no_alpha = alpha == 1.0;  // "alpha handling removed" variant
    for (int i = 0; i < rows; ++i) {
        if (static_cast<int>(targets[i].size()) != cols) throw UsageError("focal_loss: target cols mismatch");
        const bool valid = i < valid_rows;
        for (int j = 0; j < cols; ++j) {
            const bool pos = targets[i][j] != 0;
            neg_sign[static_cast<size_t>(i) * cols + j] = pos ? -1.0 : 1.0;
            const double a_t = no_alpha ? 1.0 : (pos ? alpha : 1.0 - alpha);
            weight[static_cast<size_t>(i) * cols + j] = valid ? a_t : 0.0;
        }
    }
    return focal_core(logits, neg_sign, weight, gamma);
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::vector<uint8_t>>& targets, double alpha, double gamma) {
    int positives = 0;
    for (const auto& row : targets)
        positives += std::any_of(row.begin(), row.end(), [](uint8_t b) { return b != 0; }) ? 1 : 0;
    Tensor sum = focal_loss_sum(logits, targets, alpha, gamma, logits.rows());
    return mul_scalar(sum, 1.0 / std::max(1, positives));
}

namespace {

// Vectorized 1-D DIoU over P rows. Offsets are in stride units; anchors and
// targets are grid coordinates.
Tensor diou_rows(const Tensor& pred, const std::vector<double>& anchors, const std::vector<double>& t_start,
                 const std::vector<double>& t_end, double stride) {
    const int n = pred.rows();
    Tensor anchor = Tensor::from({n, 1}, anchors);
    Tensor ts = Tensor::from({n, 1}, t_start);
    Tensor te = Tensor::from({n, 1}, t_end);
    Tensor ps = sub(anchor, mul_scalar(slice_cols(pred, 0, 1), stride));
    Tensor pe = add(anchor, mul_scalar(slice_cols(pred, 1, 1), stride));
    Tensor inter = relu(sub(minimum(pe, te), maximum(ps, ts)));
    Tensor uni = sub(add(sub(pe, ps), sub(te, ts)), inter);
    Tensor iou = div(inter, uni);
    Tensor dc = sub(mul_scalar(add(ps, pe), 0.5), mul_scalar(add(ts, te), 0.5));
    Tensor enclose = sub(maximum(pe, te), minimum(ps, ts));
    Tensor penalty = div(mul(dc, dc), mul(enclose, enclose));
    Tensor ones = Tensor::full({n, 1}, 1.0);
    return add(sub(ones, iou), penalty);
}

}  // namespace

Tensor diou_loss(const Tensor& pred_offsets, double target_ds, double target_de, double anchor, double stride) {
    if (pred_offsets.size() != 2) throw UsageError("diou_loss: expected two offsets");
    Tensor pred = pred_offsets.shape() == Shape{1, 2} ? pred_offsets : reshape(pred_offsets, {1, 2});
    const double ts = anchor - stride * target_ds;
    const double te = anchor + stride * target_de;
    if (!(te > ts)) throw DataError("diou_loss: target segment is degenerate");
    return sum_all(diou_rows(pred, {anchor}, {ts}, {te}, stride));
}

JointLoss joint_loss(const ForwardOutputs& outputs, const TargetAssignment& assignment, const JointLossInputs& in) {
    if (outputs.logits.size() != assignment.levels.size())
        throw UsageError("joint_loss: level count mismatch between outputs and assignment");
    if (in.lambda < 0.0) throw UsageError("joint_loss: lambda must be >= 0");

    Tensor cls_sum;
    Tensor reg_sum;
    int total_positives = 0;

    for (size_t m = 0; m < outputs.logits.size(); ++m) {
        const auto& la = assignment.levels[m];
        const Tensor& logits = outputs.logits[m];
        if (logits.rows() != la.length) throw UsageError("joint_loss: level length mismatch");
        std::vector<std::vector<uint8_t>> targets(la.length, std::vector<uint8_t>(in.num_columns, 0));
        for (int t = 0; t < la.length; ++t) {
            for (int cid : la.class_ids[t]) {
                auto it = in.class_to_col.find(cid);
                if (it == in.class_to_col.end())
                    throw DataError("joint_loss: class id " + std::to_string(cid) + " not in active table");
                targets[t][static_cast<size_t>(it->second)] = 1;
            }
        }
        Tensor level_cls = focal_loss_sum(logits, targets, in.alpha, in.gamma, outputs.valid_len[m]);
        cls_sum = cls_sum.defined() ? add(cls_sum, level_cls) : level_cls;

        std::vector<int> pos_rows;
        std::vector<double> anchors, t_start, t_end;
        const double stride = static_cast<double>(1 << m);
        for (int t = 0; t < la.length; ++t) {
            if (!la.positive[t]) continue;
            pos_rows.push_back(t);
            const double p = t * stride + 1.0;
            anchors.push_back(p);
            t_start.push_back(p - stride * la.reg_target[t][0]);
            t_end.push_back(p + stride * la.reg_target[t][1]);
        }
        if (!pos_rows.empty()) {
            total_positives += static_cast<int>(pos_rows.size());
            Tensor rows = gather_rows(outputs.offsets[m], pos_rows);
            Tensor level_reg = sum_all(diou_rows(rows, anchors, t_start, t_end, stride));
            reg_sum = reg_sum.defined() ? add(reg_sum, level_reg) : level_reg;
        }
    }

    const double norm = 1.0 / std::max(1, total_positives);
    JointLoss out;
    out.cls = mul_scalar(cls_sum, norm);
    out.reg = reg_sum.defined() ? mul_scalar(reg_sum, norm) : Tensor::scalar(0.0);
    out.total = add(out.cls, mul_scalar(out.reg, in.lambda));
    return out;
}

}  // namespace ovf
