#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ovformer/errors.hpp"
#include "ovformer/inference.hpp"
#include "ovformer/losses.hpp"

using namespace ovf;
namespace fs = std::filesystem;

namespace {

// Independent greedy reference: no pre-sort; repeatedly scan for the best
// remaining candidate under the same tie rules.
std::vector<Detection> nms_reference(std::vector<Detection> dets, double thresh, bool class_aware) {
    std::vector<uint8_t> gone(dets.size(), 0);
    std::vector<Detection> kept;
    for (;;) {
        int best = -1;
        for (size_t i = 0; i < dets.size(); ++i) {
            if (gone[i]) continue;
            if (best < 0) {
                best = static_cast<int>(i);
                continue;
            }
            const Detection &a = dets[i], &b = dets[static_cast<size_t>(best)];
            const bool before = a.score > b.score ||
                                (a.score == b.score &&
                                 (a.start < b.start || (a.start == b.start && a.class_id < b.class_id)));
            if (before) best = static_cast<int>(i);
        }
        if (best < 0) break;
        gone[static_cast<size_t>(best)] = 1;
        const Detection& keep = dets[static_cast<size_t>(best)];
        kept.push_back(keep);
        for (size_t i = 0; i < dets.size(); ++i) {
            if (gone[i]) continue;
            if (class_aware && dets[i].class_id != keep.class_id) continue;
            const double inter =
                std::max(0.0, std::min(keep.end, dets[i].end) - std::max(keep.start, dets[i].start));
            const double uni = (keep.end - keep.start) + (dets[i].end - dets[i].start) - inter;
            if (inter / uni > thresh) gone[i] = 1;
        }
    }
    return kept;
}

bool same(const Detection& a, const Detection& b) {
    return a.start == b.start && a.end == b.end && a.class_id == b.class_id && a.score == b.score;
}

}  // namespace

TEST_CASE("temporal_iou: hand values and degenerate input") {
    CHECK(temporal_iou(2.0, 7.0, 2.0, 7.0) == doctest::Approx(1.0));
    CHECK(temporal_iou(0.0, 1.0, 3.0, 4.0) == doctest::Approx(0.0));
    CHECK(temporal_iou(0.0, 1.0, 0.5, 1.5) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(temporal_iou(1.0, 1.0, 0.0, 2.0), UsageError);
}

TEST_CASE("decode: empty, hand arithmetic, stride scaling") {
    DecodeConfig cfg;
    cfg.score_thresh = 0.5;
    cfg.pre_nms_topk = 100;

    // all logits very negative -> empty
    std::vector<Tensor> logits = {Tensor::full({8, 2}, -100.0)};
    std::vector<Tensor> offsets = {Tensor::full({8, 2}, 1.0)};
    CHECK(decode(logits, offsets, {8}, {0, 1}, 32, cfg).empty());

    // single positive at level 1: p = 15, offsets (5,5) -> [10, 20]
    std::vector<double> lv(static_cast<size_t>(32) * 1, -100.0);
    lv[14] = 4.0;
    std::vector<double> ov(static_cast<size_t>(32) * 2, 0.1);
    ov[14 * 2] = 5.0;
    ov[14 * 2 + 1] = 5.0;
    auto dets = decode({Tensor::from({32, 1}, lv)}, {Tensor::from({32, 2}, ov)}, {32}, {0}, 32, cfg);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].start == doctest::Approx(10.0));
    CHECK(dets[0].end == doctest::Approx(20.0));
    CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))));

    // same offsets at level 2 (stride 2), t chosen so p = 15 -> [5, 25]
    std::vector<double> l2(static_cast<size_t>(16) * 1, -100.0);
    l2[7] = 4.0;  // p = 7*2 + 1 = 15
    std::vector<double> o2(static_cast<size_t>(16) * 2, 0.1);
    o2[7 * 2] = 5.0;
    o2[7 * 2 + 1] = 5.0;
    auto dets2 = decode({Tensor::full({32, 1}, -100.0), Tensor::from({16, 1}, l2)},
                        {Tensor::full({32, 2}, 0.1), Tensor::from({16, 2}, o2)}, {32, 16}, {0}, 32, cfg);
    REQUIRE(dets2.size() == 1);
    CHECK(dets2[0].start == doctest::Approx(5.0));
    CHECK(dets2[0].end == doctest::Approx(25.0));

    // clamping to [1, T]
    std::vector<double> o3(static_cast<size_t>(32) * 2, 0.1);
    o3[14 * 2] = 50.0;
    o3[14 * 2 + 1] = 50.0;
    auto dets3 = decode({Tensor::from({32, 1}, lv)}, {Tensor::from({32, 2}, o3)}, {32}, {0}, 32, cfg);
    REQUIRE(dets3.size() == 1);
    CHECK(dets3[0].start == doctest::Approx(1.0));
    CHECK(dets3[0].end == doctest::Approx(32.0));
}

TEST_CASE("nms: hand-traced greedy example and boundary threshold") {
    std::vector<Detection> dets = {
        {0.0, 1.0, 0, 0.9},    // A
        {0.1, 1.1, 0, 0.8},    // B, tIoU(A,B) = 0.9/1.1 > 0.5
        {2.0, 3.0, 0, 0.7},    // C disjoint
    };
    auto kept = nms(dets, 0.5, true);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].score == doctest::Approx(0.9));
    CHECK(kept[1].score == doctest::Approx(0.7));

    // thresh = 1.0: nothing suppressed (tIoU never strictly exceeds 1)
    auto all = nms(dets, 1.0, true);
    CHECK(all.size() == 3);

    CHECK(nms({}, 0.5, true).empty());
    CHECK_THROWS_AS(nms(dets, 0.0, true), UsageError);

    // class-aware: different classes never suppress each other
    std::vector<Detection> mixed = {{0.0, 1.0, 0, 0.9}, {0.0, 1.0, 1, 0.8}};
    CHECK(nms(mixed, 0.5, true).size() == 2);
    CHECK(nms(mixed, 0.5, false).size() == 1);
}

TEST_CASE("nms matches the brute-force reference exactly on 500 random instances") {
    std::mt19937_64 rng(307);
    for (int trial = 0; trial < 500; ++trial) {
        std::uniform_int_distribution<int> nd(0, 24);
        std::uniform_real_distribution<double> sd(0.0, 20.0);
        std::uniform_real_distribution<double> ld(0.5, 6.0);
        std::uniform_int_distribution<int> cd(0, 2);
        // quantized scores so ties actually occur
        std::uniform_int_distribution<int> qd(1, 10);
        std::vector<Detection> dets;
        const int n = nd(rng);
        for (int i = 0; i < n; ++i) {
            const double s = sd(rng);
            dets.push_back({s, s + ld(rng), cd(rng), qd(rng) / 10.0});
        }
        std::uniform_real_distribution<double> td(0.1, 1.0);
        const double thresh = td(rng);
        const bool aware = trial % 2 == 0;
        auto got = nms(dets, thresh, aware);
        auto want = nms_reference(dets, thresh, aware);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) CHECK(same(got[i], want[i]));

        // invariants: ordered scores, subset of input, no surviving overlap
        for (size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].score >= got[i].score);
        for (const auto& d : got)
            CHECK(std::any_of(dets.begin(), dets.end(), [&](const Detection& x) { return same(x, d); }));
        for (size_t i = 0; i < got.size(); ++i)
            for (size_t j = i + 1; j < got.size(); ++j) {
                if (aware && got[i].class_id != got[j].class_id) continue;
                CHECK(temporal_iou(got[i].start, got[i].end, got[j].start, got[j].end) <= thresh);
            }
    }
}

TEST_CASE("decode inverts assign_targets on random synthetic layouts") {
    std::mt19937_64 rng(311);
    for (int trial = 0; trial < 100; ++trial) {
        const int t = 64;
        const int levels = 3;
        std::vector<int> lens = {64, 32, 16};
        std::vector<ActionAnnotation> anns;
        std::uniform_int_distribution<int> nd(1, 3);
        std::uniform_int_distribution<int> len_d(6, 20);
        const int n = nd(rng);
        int cursor = 2;
        for (int i = 0; i < n; ++i) {
            const int len = len_d(rng);
            if (cursor + len + 1 > t) break;
            anns.push_back({static_cast<double>(cursor), static_cast<double>(cursor + len), i});
            cursor += len + 4;
        }
        if (anns.empty()) continue;
        AssignConfig acfg = AssignConfig::defaults(levels, 0.75);
        TargetAssignment ta = assign_targets(anns, lens, lens, acfg);

        // paint head outputs straight from the assignment
        std::vector<Tensor> logits, offsets;
        for (int m = 0; m < levels; ++m) {
            const auto& la = ta.levels[static_cast<size_t>(m)];
            std::vector<double> lv(static_cast<size_t>(la.length) * 4, -50.0);
            std::vector<double> ov(static_cast<size_t>(la.length) * 2, 0.25);
            for (int ts = 0; ts < la.length; ++ts) {
                if (!la.positive[ts]) continue;
                lv[static_cast<size_t>(ts) * 4 + anns[static_cast<size_t>(la.matched[ts])].class_id] = 8.0;
                ov[static_cast<size_t>(ts) * 2] = la.reg_target[ts][0];
                ov[static_cast<size_t>(ts) * 2 + 1] = la.reg_target[ts][1];
            }
            logits.push_back(Tensor::from({la.length, 4}, lv));
            offsets.push_back(Tensor::from({la.length, 2}, ov));
        }
        DecodeConfig dcfg;
        dcfg.score_thresh = 0.9;
        dcfg.pre_nms_topk = 10000;
        auto dets = decode(logits, offsets, lens, {0, 1, 2, 3}, t, dcfg);

        // every detection reconstructs its matched annotation to 1e-9
        size_t expected = 0;
        for (const auto& la : ta.levels)
            for (int ts = 0; ts < la.length; ++ts) expected += la.positive[ts];
        CHECK(dets.size() == expected);
        for (const auto& d : dets) {
            bool matched = false;
            for (const auto& a : anns)
                if (std::fabs(d.start - a.start) < 1e-9 && std::fabs(d.end - a.end) < 1e-9 &&
                    d.class_id == a.class_id)
                    matched = true;
            CHECK(matched);
        }
    }
}

TEST_CASE("predictions file round-trips and rejects bad json") {
    auto dir = fs::temp_directory_path() / ("ovf_inf_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    std::vector<VideoPredictions> preds = {
        {"v0", {{1.0, 5.0, 0, 0.75}, {3.0, 9.0, 2, 0.5}}},
        {"v1", {}},
    };
    const std::string path = (dir / "preds.json").string();
    save_predictions(path, preds);
    auto loaded = load_predictions(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].video_id == "v0");
    REQUIRE(loaded[0].detections.size() == 2);
    CHECK(loaded[0].detections[1].class_id == 2);
    CHECK(loaded[1].detections.empty());

    std::ofstream bad(dir / "bad.json");
    bad << "{not json";
    bad.close();
    CHECK_THROWS_AS(load_predictions((dir / "bad.json").string()), FormatError);
}
