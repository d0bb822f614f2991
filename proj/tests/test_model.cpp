#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ovformer/errors.hpp"
#include "ovformer/model.hpp"
#include "ovformer/textbank.hpp"

using namespace ovf;
namespace fs = std::filesystem;

namespace {

int g_dir_counter = 0;

fs::path temp_dir() {
    auto p = fs::temp_directory_path() /
             ("ovf_model_" + std::to_string(::getpid()) + "_" + std::to_string(g_dir_counter++));
    fs::create_directories(p);
    return p;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.h = 2;
    cfg.m = 2;
    cfg.s = 8;
    cfg.d_v = 6;
    cfg.d_f = 6;
    cfg.ffn_mult = 2;
    cfg.head_layers = 1;
    return cfg;
}

VideoFeatures random_video(const ModelConfig& cfg, int t, uint64_t seed, int valid = -1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> sv(static_cast<size_t>(t) * cfg.d_v), fv(static_cast<size_t>(t) * cfg.d_f);
    for (double& x : sv) x = g(rng);
    for (double& x : fv) x = g(rng);
    VideoFeatures v;
    v.id = "t";
    v.valid_len = valid < 0 ? t : valid;
    if (valid >= 0) {  // zero the padded tail like pad_or_window does
        for (int i = valid; i < t; ++i) {
            for (int c = 0; c < cfg.d_v; ++c) sv[static_cast<size_t>(i) * cfg.d_v + c] = 0.0;
            for (int c = 0; c < cfg.d_f; ++c) fv[static_cast<size_t>(i) * cfg.d_f + c] = 0.0;
        }
    }
    v.snippet = Tensor::from({t, cfg.d_v}, std::move(sv));
    v.frame = Tensor::from({t, cfg.d_f}, std::move(fv));
    return v;
}

ClassEmbeddingTable random_table(int a, int s, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    ClassEmbeddingTable t;
    t.num_classes = a;
    t.dim = s;
    t.z.resize(static_cast<size_t>(a) * s);
    for (double& x : t.z) x = g(rng);
    return t;
}

void set_zero(ModelParams& p, const std::string& name) {
    for (double& x : p.at(name).mut_data()) x = 0.0;
}

}  // namespace

TEST_CASE("project_inputs: zero input with zero bias gives zero, shapes hold") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 1);
    set_zero(p, "proj_v.c1.b");
    set_zero(p, "proj_v.c2.b");
    set_zero(p, "proj_f.c1.b");
    set_zero(p, "proj_f.c2.b");
    VideoFeatures v;
    v.id = "z";
    v.snippet = Tensor::zeros({5, cfg.d_v});
    v.frame = Tensor::zeros({5, cfg.d_f});
    v.valid_len = 5;
    auto [zv, zf] = project_inputs(v, p, cfg);
    CHECK(zv.shape() == Shape{5, cfg.d});
    CHECK(zf.shape() == Shape{5, cfg.d});
    for (double x : zv.data()) CHECK(x == 0.0);
    for (double x : zf.data()) CHECK(x == 0.0);

    VideoFeatures bad = random_video(cfg, 5, 3);
    bad.snippet = Tensor::zeros({5, cfg.d_v + 1});
    CHECK_THROWS_AS(project_inputs(bad, p, cfg), ConfigError);
}

TEST_CASE("project_inputs gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 5);
    VideoFeatures v = random_video(cfg, 4, 7);
    for (const char* name : {"proj_v.c1.w", "proj_f.c2.b"}) {
        Tensor& leaf = p.at(name);
        leaf.zero_grad();
        const double err = grad_check(
            [&](const Tensor&) {
                auto [zv, zf] = project_inputs(v, p, cfg);
                return sum_all(add(zv, zf));
            },
            leaf, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("self_attend: single position, identical rows, permutation equivariance") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 11);
    std::mt19937_64 rng(13);
    std::normal_distribution<double> g(0.0, 1.0);

    // T = 1: softmax over one key is exactly 1, so out = x + Wo(V(norm(x)))
    std::vector<double> row(cfg.d);
    for (double& x : row) x = g(rng);
    Tensor x1 = Tensor::from({1, cfg.d}, row);
    Tensor out1 = self_attend(x1, p, cfg, 0, 1);
    Tensor h = layer_norm(x1, p.at("enc.l0.self.norm.gain"), p.at("enc.l0.self.norm.bias"), 1e-5);
    std::vector<Tensor> alphas;
    for (int hh = 0; hh < cfg.h; ++hh)
        alphas.push_back(matmul(h, p.at("enc.l0.self.h" + std::to_string(hh) + ".wv")));
    Tensor expect = add(x1, matmul(concat_cols(alphas), p.at("enc.l0.self.wo")));
    for (size_t i = 0; i < out1.size(); ++i) CHECK(out1.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));

    // identical rows: uniform attention makes every output row identical
    std::vector<double> rep;
    for (int t = 0; t < 4; ++t) rep.insert(rep.end(), row.begin(), row.end());
    Tensor xr = Tensor::from({4, cfg.d}, rep);
    Tensor outr = self_attend(xr, p, cfg, 0, 4);
    for (int t = 1; t < 4; ++t)
        for (int c = 0; c < cfg.d; ++c)
            CHECK(outr.data()[static_cast<size_t>(t) * cfg.d + c] ==
                  doctest::Approx(outr.data()[static_cast<size_t>(c)]).epsilon(1e-12));

    // permuting positions permutes outputs identically (no mask)
    std::vector<double> xv(static_cast<size_t>(5) * cfg.d);
    for (double& x : xv) x = g(rng);
    Tensor xa = Tensor::from({5, cfg.d}, xv);
    std::vector<int> perm = {3, 0, 4, 1, 2};
    std::vector<double> xpv(xv.size());
    for (int t = 0; t < 5; ++t)
        std::copy_n(xv.data() + static_cast<size_t>(perm[t]) * cfg.d, cfg.d,
                    xpv.data() + static_cast<size_t>(t) * cfg.d);
    Tensor outa = self_attend(xa, p, cfg, 0, 5);
    Tensor outp = self_attend(Tensor::from({5, cfg.d}, xpv), p, cfg, 0, 5);
    for (int t = 0; t < 5; ++t)
        for (int c = 0; c < cfg.d; ++c)
            CHECK(outp.data()[static_cast<size_t>(t) * cfg.d + c] ==
                  doctest::Approx(outa.data()[static_cast<size_t>(perm[t]) * cfg.d + c]).epsilon(1e-9));
}

TEST_CASE("attention rows sum to one at every level and head") {
    // exposed indirectly: verify the raw softmax on a random logits matrix
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 2.0);
    std::vector<double> lv(7 * 7);
    for (double& x : lv) x = g(rng);
    Tensor a = softmax_rows(Tensor::from({7, 7}, lv));
    for (int i = 0; i < 7; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += a.data()[static_cast<size_t>(i) * 7 + j];
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("cross_attend: single class, key permutation invariance") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 19);
    VideoFeatures v = random_video(cfg, 4, 23);
    auto [zv, zf] = project_inputs(v, p, cfg);

    // A = 1: every attention row is [1]
    ClassEmbeddingTable one = random_table(1, cfg.s, 29);
    Tensor zl1 = table_tensor(one);
    Tensor out1 = cross_attend(zf, zl1, p, cfg, 0, 4);
    Tensor h = layer_norm(zf, p.at("enc.l0.cross.norm.gain"), p.at("enc.l0.cross.norm.bias"), 1e-5);
    std::vector<Tensor> alphas;
    for (int hh = 0; hh < cfg.h; ++hh) {
        // softmax over a single key is 1 regardless of the logit
        alphas.push_back(matmul(Tensor::full({4, 1}, 1.0),
                                matmul(zl1, p.at("enc.l0.cross.h" + std::to_string(hh) + ".wv"))));
    }
    Tensor expect = add(zf, matmul(concat_cols(alphas), p.at("enc.l0.cross.wo")));
    for (size_t i = 0; i < out1.size(); ++i)
        CHECK(out1.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));

    CHECK_THROWS_AS(cross_attend(zf, Tensor::zeros({0, cfg.s}), p, cfg, 0, 4), UsageError);

    // permuting class rows leaves the output unchanged (keys are a set)
    ClassEmbeddingTable tab = random_table(5, cfg.s, 31);
    Tensor outa = cross_attend(zf, table_tensor(tab), p, cfg, 0, 4);
    ClassEmbeddingTable perm = tab;
    std::vector<int> order = {4, 2, 0, 1, 3};
    for (int i = 0; i < 5; ++i)
        std::copy_n(tab.row(order[static_cast<size_t>(i)]), tab.dim,
                    perm.z.data() + static_cast<size_t>(i) * tab.dim);
    Tensor outb = cross_attend(zf, table_tensor(perm), p, cfg, 0, 4);
    for (size_t i = 0; i < outa.size(); ++i)
        CHECK(outa.data()[i] == doctest::Approx(outb.data()[i]).epsilon(1e-12));
}

TEST_CASE("mixer_level: ablation contract, FFN passthrough, gradients") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 37);
    VideoFeatures v = random_video(cfg, 4, 41);
    auto [zv, zf] = project_inputs(v, p, cfg);
    ClassEmbeddingTable ta = random_table(3, cfg.s, 43);
    ClassEmbeddingTable tb = random_table(3, cfg.s, 44);

    // late fusion: output independent of the class table, bitwise
    ModelConfig late = cfg;
    late.late_fusion_only = true;
    Tensor la = mixer_level(zv, zf, table_tensor(ta), p, late, 0, 4);
    Tensor lb = mixer_level(zv, zf, table_tensor(tb), p, late, 0, 4);
    CHECK(la.data() == lb.data());
    // and with cross attention on, the table does matter
    Tensor fa = mixer_level(zv, zf, table_tensor(ta), p, cfg, 0, 4);
    Tensor fb = mixer_level(zv, zf, table_tensor(tb), p, cfg, 0, 4);
    CHECK(fa.data() != fb.data());

    // zero FFN weights and biases: residual passthrough of Z_F' + Z_V'
    ModelParams pz = ModelParams::init(cfg, 37);
    set_zero(pz, "enc.l0.ffn.w1");
    set_zero(pz, "enc.l0.ffn.b1");
    set_zero(pz, "enc.l0.ffn.w2");
    set_zero(pz, "enc.l0.ffn.b2");
    Tensor sum = add(cross_attend(zf, table_tensor(ta), pz, cfg, 0, 4), self_attend(zv, pz, cfg, 0, 4));
    Tensor mixed = mixer_level(zv, zf, table_tensor(ta), pz, cfg, 0, 4);
    for (size_t i = 0; i < sum.size(); ++i) CHECK(mixed.data()[i] == doctest::Approx(sum.data()[i]).epsilon(1e-12));

    // full-block gradient check against finite differences
    for (const char* name : {"enc.l0.self.h0.wq", "enc.l0.cross.h1.wk", "enc.l0.ffn.w1"}) {
        Tensor& leaf = p.at(name);
        leaf.zero_grad();
        const double err = grad_check(
            [&](const Tensor&) {
                auto [a, b] = project_inputs(v, p, cfg);
                return sum_all(mixer_level(a, b, table_tensor(ta), p, cfg, 0, 4));
            },
            leaf, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("encode: pyramid shape law and level count") {
    ModelConfig cfg = tiny_config();
    cfg.m = 3;
    ModelParams p = ModelParams::init(cfg, 47);
    VideoFeatures v = random_video(cfg, 16, 53);
    auto [zv, zf] = project_inputs(v, p, cfg);
    ClassEmbeddingTable tab = random_table(4, cfg.s, 59);
    PyramidFeatures pyr = encode(zv, zf, table_tensor(tab), p, cfg, 16);
    REQUIRE(pyr.levels.size() == 3);
    CHECK(pyr.levels[0].rows() == 16);
    CHECK(pyr.levels[1].rows() == 8);
    CHECK(pyr.levels[2].rows() == 4);

    // shape law for awkward lengths: T_{m+1} = ceil(T_m / 2)
    ModelConfig cfg1 = tiny_config();
    cfg1.m = 4;
    ModelParams p1 = ModelParams::init(cfg1, 61);
    VideoFeatures v1 = random_video(cfg1, 13, 67);
    auto [a1, b1] = project_inputs(v1, p1, cfg1);
    PyramidFeatures pyr1 = encode(a1, b1, table_tensor(tab), p1, cfg1, 13);
    CHECK(pyr1.levels[0].rows() == 13);
    CHECK(pyr1.levels[1].rows() == 7);
    CHECK(pyr1.levels[2].rows() == 4);
    CHECK(pyr1.levels[3].rows() == 2);

    // M = 1: single level, no downsampling
    ModelConfig cfg2 = tiny_config();
    cfg2.m = 1;
    ModelParams p2 = ModelParams::init(cfg2, 71);
    PyramidFeatures pyr2 = encode(zv, zf, table_tensor(tab), p2, cfg2, 16);
    CHECK(pyr2.levels.size() == 1);
    CHECK(pyr2.levels[0].rows() == 16);

    // T too short for the pyramid
    ModelConfig cfg3 = tiny_config();
    cfg3.m = 6;
    ModelParams p3 = ModelParams::init(cfg3, 73);
    VideoFeatures v3 = random_video(cfg3, 8, 79);
    auto [a3, b3] = project_inputs(v3, p3, cfg3);
    CHECK_THROWS_AS(encode(a3, b3, table_tensor(tab), p3, cfg3, 8), ConfigError);
}

TEST_CASE("masked tail positions match the truncated computation bitwise") {
    ModelConfig cfg = tiny_config();
    cfg.m = 2;
    ModelParams p = ModelParams::init(cfg, 83);
    ClassEmbeddingTable tab = random_table(3, cfg.s, 89);

    VideoFeatures full = random_video(cfg, 11, 97);  // unpadded, T = 11
    VideoFeatures padded;
    padded.id = "pad";
    padded.valid_len = 11;
    std::vector<double> sv(static_cast<size_t>(16) * cfg.d_v, 0.0), fv(static_cast<size_t>(16) * cfg.d_f, 0.0);
    std::copy(full.snippet.data().begin(), full.snippet.data().end(), sv.begin());
    std::copy(full.frame.data().begin(), full.frame.data().end(), fv.begin());
    padded.snippet = Tensor::from({16, cfg.d_v}, std::move(sv));
    padded.frame = Tensor::from({16, cfg.d_f}, std::move(fv));

    ForwardOutputs a = forward(full, tab, p, cfg);
    ForwardOutputs b = forward(padded, tab, p, cfg);
    REQUIRE(a.valid_len == std::vector<int>{11, 6});
    REQUIRE(b.valid_len == std::vector<int>{11, 6});
    for (size_t m = 0; m < a.logits.size(); ++m) {
        const int cols = a.logits[m].cols();
        for (int t = 0; t < a.valid_len[m]; ++t)
            for (int c = 0; c < cols; ++c)
                CHECK(a.logits[m].data()[static_cast<size_t>(t) * cols + c] ==
                      b.logits[m].data()[static_cast<size_t>(t) * cols + c]);
        for (int t = 0; t < a.valid_len[m]; ++t)
            for (int c = 0; c < 2; ++c)
                CHECK(a.offsets[m].data()[static_cast<size_t>(t) * 2 + c] ==
                      b.offsets[m].data()[static_cast<size_t>(t) * 2 + c]);
    }
}

TEST_CASE("classify: constructed argmax, column equivariance, scale invariance") {
    ModelConfig cfg = tiny_config();
    cfg.head_layers = 1;
    ModelParams p = ModelParams::init(cfg, 101);

    // identity head: center-tap identity conv, zero bias, identity text map
    Tensor& cw = p.at("head.cls.c0.w");
    std::fill(cw.mut_data().begin(), cw.mut_data().end(), 0.0);
    for (int c = 0; c < cfg.d; ++c) cw.mut_data()[(1 * cfg.d + c) * cfg.d + c] = 1.0;
    set_zero(p, "head.cls.c0.b");
    Tensor& wl = p.at("head.cls.wl");
    std::fill(wl.mut_data().begin(), wl.mut_data().end(), 0.0);
    for (int c = 0; c < cfg.s; ++c) wl.mut_data()[static_cast<size_t>(c) * cfg.d + c] = 1.0;

    // class a embeds along axis a; the feature at step t is axis t
    ClassEmbeddingTable tab;
    tab.num_classes = 4;
    tab.dim = cfg.s;
    tab.z.assign(static_cast<size_t>(4) * cfg.s, 0.0);
    for (int a = 0; a < 4; ++a) tab.z[static_cast<size_t>(a) * cfg.s + a] = 2.0;
    PyramidFeatures pyr;
    std::vector<double> feat(static_cast<size_t>(4) * cfg.d, 0.0);
    for (int t = 0; t < 4; ++t) feat[static_cast<size_t>(t) * cfg.d + t] = 3.0;
    pyr.levels.push_back(Tensor::from({4, cfg.d}, feat));
    pyr.valid_len.push_back(4);

    auto logits = classify(pyr, table_tensor(tab), p, cfg);
    REQUIRE(logits.size() == 1);
    for (int t = 0; t < 4; ++t) {
        int arg = 0;
        for (int a = 1; a < 4; ++a)
            if (logits[0].data()[static_cast<size_t>(t) * 4 + a] > logits[0].data()[static_cast<size_t>(t) * 4 + arg])
                arg = a;
        CHECK(arg == t);
    }

    // swapping two class rows swaps the logit columns exactly
    ModelParams pr = ModelParams::init(cfg, 103);
    ClassEmbeddingTable rt = random_table(4, cfg.s, 107);
    auto base = classify(pyr, table_tensor(rt), pr, cfg);
    ClassEmbeddingTable swapped = rt;
    for (int j = 0; j < rt.dim; ++j) {
        std::swap(swapped.z[static_cast<size_t>(1) * rt.dim + j], swapped.z[static_cast<size_t>(2) * rt.dim + j]);
    }
    auto swapl = classify(pyr, table_tensor(swapped), pr, cfg);
    for (int t = 0; t < 4; ++t) {
        CHECK(base[0].data()[static_cast<size_t>(t) * 4 + 1] == swapl[0].data()[static_cast<size_t>(t) * 4 + 2]);
        CHECK(base[0].data()[static_cast<size_t>(t) * 4 + 2] == swapl[0].data()[static_cast<size_t>(t) * 4 + 1]);
        CHECK(base[0].data()[static_cast<size_t>(t) * 4 + 0] == swapl[0].data()[static_cast<size_t>(t) * 4 + 0]);
    }

    // scaling a class embedding by c > 0 leaves its cosine logit unchanged
    ClassEmbeddingTable scaled = rt;
    for (int j = 0; j < rt.dim; ++j) scaled.z[static_cast<size_t>(3) * rt.dim + j] *= 7.5;
    auto scl = classify(pyr, table_tensor(scaled), pr, cfg);
    for (int t = 0; t < 4; ++t)
        CHECK(std::fabs(base[0].data()[static_cast<size_t>(t) * 4 + 3] -
                        scl[0].data()[static_cast<size_t>(t) * 4 + 3]) < 1e-9);
}

TEST_CASE("regress: positivity, zero-head closed form, gradient") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 109);
    VideoFeatures v = random_video(cfg, 8, 113);
    ClassEmbeddingTable tab = random_table(3, cfg.s, 127);
    ForwardOutputs out = forward(v, tab, p, cfg);
    for (const auto& level : out.offsets)
        for (double x : level.data()) CHECK(x > 0.0);

    // zero final layer: offsets are softplus(0) = ln 2 everywhere
    ModelParams pz = ModelParams::init(cfg, 109);
    set_zero(pz, "head.reg.out.w");
    set_zero(pz, "head.reg.out.b");
    ForwardOutputs outz = forward(v, tab, pz, cfg);
    for (const auto& level : outz.offsets)
        for (double x : level.data()) CHECK(x == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor& leaf = p.at("head.reg.c0.w");
    leaf.zero_grad();
    const double err = grad_check(
        [&](const Tensor&) {
            ForwardOutputs o = forward(v, tab, p, cfg);
            Tensor acc = sum_all(o.offsets[0]);
            for (size_t m = 1; m < o.offsets.size(); ++m) acc = add(acc, sum_all(o.offsets[m]));
            return acc;
        },
        leaf, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("forward: shape contract and determinism") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 131);
    VideoFeatures v = random_video(cfg, 10, 137);
    ClassEmbeddingTable tab = random_table(5, cfg.s, 139);
    ForwardOutputs a = forward(v, tab, p, cfg);
    REQUIRE(a.logits.size() == 2);
    CHECK(a.logits[0].shape() == Shape{10, 5});
    CHECK(a.logits[1].shape() == Shape{5, 5});
    CHECK(a.offsets[0].shape() == Shape{10, 2});
    CHECK(a.offsets[1].shape() == Shape{5, 2});

    ForwardOutputs b = forward(v, tab, p, cfg);
    for (size_t m = 0; m < a.logits.size(); ++m) {
        CHECK(a.logits[m].data() == b.logits[m].data());
        CHECK(a.offsets[m].data() == b.offsets[m].data());
    }
}

TEST_CASE("checkpoint: bit-exact round-trip, corruption, mismatch naming") {
    auto dir = temp_dir();
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 149);
    const std::string path = (dir / "model.ovck").string();
    save_checkpoint(path, p, cfg, 149, 1);
    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.seed == 149);
    CHECK(ck.stage == 1);
    REQUIRE(ck.params.tensors.size() == p.tensors.size());
    for (const auto& [name, t] : p.tensors) CHECK(ck.params.at(name).data() == t.data());

    // forward after save -> load reproduces outputs bit-exactly
    VideoFeatures v = random_video(cfg, 8, 151);
    ClassEmbeddingTable tab = random_table(3, cfg.s, 157);
    ForwardOutputs a = forward(v, tab, p, cfg);
    ForwardOutputs b = forward(v, tab, ck.params, ck.config);
    for (size_t m = 0; m < a.logits.size(); ++m) CHECK(a.logits[m].data() == b.logits[m].data());

    // save -> load -> save produces identical bytes
    const std::string path2 = (dir / "model2.ovck").string();
    save_checkpoint(path2, ck.params, ck.config, ck.seed, ck.stage);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);

    // truncation fails cleanly, nothing partially loaded
    const std::string trunc = (dir / "trunc.ovck").string();
    save_checkpoint(trunc, p, cfg, 1, 1);
    fs::resize_file(trunc, fs::file_size(trunc) / 2);
    CHECK_THROWS_AS(load_checkpoint(trunc), FormatError);

    // config mismatch names the offending field
    ModelConfig other = cfg;
    other.d = 16;
    CHECK_THROWS_WITH_AS(check_config_compatible(other, cfg), doctest::Contains("D: expected 16, found 8"),
                         ConfigError);
}
