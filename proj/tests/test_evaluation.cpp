#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ovformer/errors.hpp"
#include "ovformer/evaluation.hpp"

using namespace ovf;
namespace fs = std::filesystem;

namespace {

// Exhaustive AP reference: re-derives matching, precision/recall and the
// interpolated envelope with independent bookkeeping.
double ap_reference(std::vector<ClassDetection> dets, std::vector<ClassGroundTruth> gts, double thresh) {
    if (gts.empty()) return std::nan("");
    if (dets.empty()) return 0.0;
    std::stable_sort(dets.begin(), dets.end(), [](const ClassDetection& a, const ClassDetection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.video_id < b.video_id;
    });
    std::vector<int> taken(gts.size(), 0);
    std::vector<int> tp_flags;
    for (const auto& d : dets) {
        int best = -1;
        double best_iou = -1.0;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].video_id != d.video_id) continue;
            const double inter = std::max(0.0, std::min(d.end, gts[g].end) - std::max(d.start, gts[g].start));
            const double uni = (d.end - d.start) + (gts[g].end - gts[g].start) - inter;
            const double iou = inter / uni;
            if (iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0 && best_iou >= thresh) {
            taken[static_cast<size_t>(best)] = 1;
            tp_flags.push_back(1);
        } else {
            tp_flags.push_back(0);
        }
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (size_t k = 0; k < tp_flags.size(); ++k) {
        int tp_k = 0;
        for (size_t j = 0; j <= k; ++j) tp_k += tp_flags[j];
        const double recall = static_cast<double>(tp_k) / static_cast<double>(gts.size());
        // max precision over all ranks with recall >= current recall
        double best_prec = 0.0;
        for (size_t j = k; j < tp_flags.size(); ++j) {
            int tp_j = 0;
            for (size_t i = 0; i <= j; ++i) tp_j += tp_flags[i];
            best_prec = std::max(best_prec, static_cast<double>(tp_j) / static_cast<double>(j + 1));
        }
        ap += (recall - prev_recall) * best_prec;
        prev_recall = recall;
    }
    return ap;
}

}  // namespace

TEST_CASE("average_precision: spec examples") {
    // one GT, one matching detection
    CHECK(average_precision({{"v", 1.0, 5.0, 0.9}}, {{"v", 1.0, 5.0}}, 0.5) == doctest::Approx(1.0));

    // det1 non-matching, det2 matching: precision at TP = 1/2, recall 1 -> 0.5
    CHECK(average_precision({{"v", 20.0, 25.0, 0.9}, {"v", 1.0, 5.0, 0.8}}, {{"v", 1.0, 5.0}}, 0.5) ==
          doctest::Approx(0.5));

    // no detections
    CHECK(average_precision({}, {{"v", 1.0, 5.0}}, 0.5) == doctest::Approx(0.0));

    // zero ground truth: undefined
    CHECK(std::isnan(average_precision({{"v", 1.0, 5.0, 0.9}}, {}, 0.5)));

    // duplicate detections of one GT: exactly one TP, the rest FP
    const double ap = average_precision(
        {{"v", 1.0, 5.0, 0.9}, {"v", 1.0, 5.0, 0.8}, {"v", 1.0, 5.0, 0.7}}, {{"v", 1.0, 5.0}}, 0.5);
    CHECK(ap == doctest::Approx(1.0));  // the top-ranked one matches at precision 1
}

TEST_CASE("average_precision equals the exhaustive reference on random instances") {
    std::mt19937_64 rng(401);
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<int> nd(0, 12), gd(0, 6), vd(0, 2);
        std::uniform_real_distribution<double> sd(0.0, 30.0), ld(1.0, 8.0);
        std::uniform_int_distribution<int> qd(1, 5);
        std::vector<ClassDetection> dets;
        std::vector<ClassGroundTruth> gts;
        const int n = nd(rng), g = gd(rng);
        for (int i = 0; i < n; ++i) {
            const double s = sd(rng);
            dets.push_back({"v" + std::to_string(vd(rng)), s, s + ld(rng), qd(rng) / 5.0});
        }
        for (int i = 0; i < g; ++i) {
            const double s = sd(rng);
            gts.push_back({"v" + std::to_string(vd(rng)), s, s + ld(rng)});
        }
        for (double thresh : {0.3, 0.5, 0.7}) {
            const double got = average_precision(dets, gts, thresh);
            const double want = ap_reference(dets, gts, thresh);
            if (std::isnan(want))
                CHECK(std::isnan(got));
            else
                CHECK(got == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("AP properties: threshold monotonicity and score-order invariance") {
    std::mt19937_64 rng(409);
    std::uniform_real_distribution<double> sd(0.0, 30.0), ld(1.0, 8.0);
    std::uniform_real_distribution<double> score(0.01, 0.99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ClassDetection> dets;
        std::vector<ClassGroundTruth> gts;
        for (int i = 0; i < 8; ++i) {
            const double s = sd(rng);
            dets.push_back({"v", s, s + ld(rng), score(rng)});
        }
        for (int i = 0; i < 4; ++i) {
            const double s = sd(rng);
            gts.push_back({"v", s, s + ld(rng)});
        }
        double prev = 2.0;
        for (double thresh : {0.1, 0.3, 0.5, 0.7, 0.9}) {
            const double ap = average_precision(dets, gts, thresh);
            CHECK(ap <= prev + 1e-12);
            CHECK(ap >= 0.0);
            CHECK(ap <= 1.0);
            prev = ap;
        }
        // strictly increasing transform of all scores leaves AP unchanged
        auto squashed = dets;
        for (auto& d : squashed) d.score = std::tanh(3.0 * d.score);
        CHECK(average_precision(squashed, gts, 0.5) == doctest::Approx(average_precision(dets, gts, 0.5)));
    }
}

namespace {

Vocabulary eval_vocab() {
    Vocabulary v;
    v.classes = {{0, "b0", Split::Base}, {1, "b1", Split::Base}, {2, "n0", Split::Novel}};
    v.validate();
    return v;
}

DatasetManifest eval_gt() {
    DatasetManifest m;
    m.name = "gt";
    m.vocab_path = "vocab.tsv";
    m.videos.push_back({"v0", "", {{2.0, 10.0, 0}, {20.0, 30.0, 2}}});
    m.videos.push_back({"v1", "", {{5.0, 15.0, 1}}});
    return m;
}

}  // namespace

TEST_CASE("evaluate: perfect predictions give mAP 1.0 everywhere") {
    EvalConfig cfg;
    cfg.tiou_grid = {0.3, 0.5, 0.7};
    std::vector<VideoPredictions> preds = {
        {"v0", {{2.0, 10.0, 0, 0.9}, {20.0, 30.0, 2, 0.8}}},
        {"v1", {{5.0, 15.0, 1, 0.95}}},
    };
    EvalReport r = evaluate(preds, eval_gt(), eval_vocab(), cfg);
    CHECK(r.map_base == doctest::Approx(1.0));
    CHECK(r.map_novel == doctest::Approx(1.0));
    CHECK(r.map_all == doctest::Approx(1.0));
    // per-detection audit labels exist for every (threshold, detection)
    CHECK(r.labels.size() == 3 * 3);
    for (const auto& l : r.labels) CHECK(l.tp);
}

TEST_CASE("evaluate: novel-only correct, base empty") {
    EvalConfig cfg;
    cfg.tiou_grid = {0.5};
    std::vector<VideoPredictions> preds = {{"v0", {{20.0, 30.0, 2, 0.8}}}, {"v1", {}}};
    EvalReport r = evaluate(preds, eval_gt(), eval_vocab(), cfg);
    CHECK(r.map_novel == doctest::Approx(1.0));
    CHECK(r.map_base == doctest::Approx(0.0));
    // class-mean over base ∪ novel, not the mean of the two split mAPs
    CHECK(r.map_all == doctest::Approx(1.0 / 3.0));

    // unknown class id in predictions is a data error
    std::vector<VideoPredictions> bad = {{"v0", {{1.0, 2.0, 9, 0.5}}}};
    CHECK_THROWS_AS(evaluate(bad, eval_gt(), eval_vocab(), cfg), DataError);
}

TEST_CASE("evaluate excludes zero-GT classes from split means") {
    Vocabulary vocab;
    vocab.classes = {{0, "a", Split::Base}, {1, "b", Split::Base}, {2, "c", Split::Novel}};
    vocab.validate();
    DatasetManifest gt;
    gt.name = "g";
    gt.vocab_path = "v";
    gt.videos.push_back({"v0", "", {{2.0, 10.0, 0}}});  // only class 0 has GT
    EvalConfig cfg;
    cfg.tiou_grid = {0.5};
    std::vector<VideoPredictions> preds = {{"v0", {{2.0, 10.0, 0, 0.9}, {12.0, 14.0, 1, 0.4}}}};
    EvalReport r = evaluate(preds, gt, vocab, cfg);
    CHECK(r.map_base == doctest::Approx(1.0));   // class 1 has no GT: excluded, not counted as 0
    CHECK(std::isnan(r.map_novel));              // novel split has no evaluable class
    CHECK(r.per_class[1].num_gt == 0);
    CHECK(std::isnan(r.per_class[1].ap[0]));
}

TEST_CASE("report files round-trip the summary exactly") {
    auto dir = fs::temp_directory_path() / ("ovf_eval_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    EvalConfig cfg;
    cfg.tiou_grid = {0.3, 0.5};
    std::vector<VideoPredictions> preds = {
        {"v0", {{2.0, 9.5, 0, 0.9}, {21.0, 29.0, 2, 0.7}}},
        {"v1", {{5.0, 16.0, 1, 0.6}}},
    };
    EvalReport r = evaluate(preds, eval_gt(), eval_vocab(), cfg);
    const std::string base = (dir / "eval").string();
    write_report(r, base);
    EvalReport r2 = load_report_summary(base + ".json");
    CHECK(r2.map_base == doctest::Approx(r.map_base).epsilon(1e-15));
    CHECK(r2.map_novel == doctest::Approx(r.map_novel).epsilon(1e-15));
    CHECK(r2.map_all == doctest::Approx(r.map_all).epsilon(1e-15));
    REQUIRE(r2.per_class.size() == r.per_class.size());
    for (size_t i = 0; i < r.per_class.size(); ++i)
        for (size_t k = 0; k < cfg.tiou_grid.size(); ++k) {
            if (std::isnan(r.per_class[i].ap[k]))
                CHECK(std::isnan(r2.per_class[i].ap[k]));
            else
                CHECK(r2.per_class[i].ap[k] == r.per_class[i].ap[k]);
        }

    // empty report still writes valid files
    EvalReport empty;
    empty.config = cfg;
    write_report(empty, (dir / "empty").string());
    EvalReport e2 = load_report_summary((dir / "empty").string() + ".json");
    CHECK(e2.per_class.empty());
    CHECK(std::isnan(e2.map_all));

    // per-class table row count == evaluable classes + header
    std::ifstream table(base + "_classes.txt");
    int lines = 0;
    std::string line;
    while (std::getline(table, line)) ++lines;
    CHECK(lines == 1 + static_cast<int>(r.per_class.size()));
}

TEST_CASE("eval config validation") {
    EvalConfig bad;
    bad.tiou_grid = {0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad.tiou_grid = {0.5, 0.4};
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad.tiou_grid = {0.0};
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad.tiou_grid = {1.5};
    CHECK_THROWS_AS(bad.validate(), UsageError);
}
