#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>

#include "aimlab/aim.hpp"

using namespace aimlab;

namespace {

AimConfig small_config() {
    AimConfig cfg;
    cfg.m = 4;
    cfg.k = 2;
    cfg.l = 1;
    cfg.d = 8;
    cfg.d_hidden = 6;
    cfg.d_out = 5;
    return cfg;
}

} // namespace

TEST_CASE("attend reproduces the hand-computed two-slot softmax") {
    // One mechanism, d = 1, weights arranged so the input-slot logit is exactly 1.
    AimConfig cfg;
    cfg.m = 1;
    cfg.k = 1;
    cfg.l = 0;
    cfg.d = 1;
    cfg.d_hidden = 1;
    cfg.d_out = 2;
    Rng rng(1);
    AimParams p = AimParams::init(2, cfg, rng);
    p.h[0].data() = {1.0};
    p.wq[0].data() = {1.0};
    p.wk.data() = {1.0, 0.0}; // z * wk picks the first coordinate
    Tensor z = Tensor::from({1.0, 0.0}, {2});

    Attention att = attend(z, p);
    CHECK(att.score[0].item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-4));
    CHECK(att.score[0].item() == doctest::Approx(0.7311).epsilon(1e-4));
}

TEST_CASE("attend on the zero input scores one half everywhere") {
    AimConfig cfg = small_config();
    Rng rng(2);
    AimParams p = AimParams::init(10, cfg, rng);
    Attention att = attend(Tensor::zeros({10}), p);
    for (const auto& s : att.score) CHECK(s.item() == 0.5);
}

TEST_CASE("attention pairs are normalized") {
    AimConfig cfg = small_config();
    Rng rng(3);
    AimParams p = AimParams::init(7, cfg, rng);
    Tensor z = Tensor::uniform({7}, 2.0, rng);
    Attention att = attend(z, p);
    for (const auto& pr : att.pair_values()) {
        CHECK(std::abs(pr[0] + pr[1] - 1.0) < 1e-12);
    }
    Tensor wrong = Tensor::zeros({6});
    CHECK_THROWS_AS(attend(wrong, p), DimensionError);
}

TEST_CASE("select_hard picks the top K with lower-index tie break") {
    auto m1 = select_hard({0.9, 0.1, 0.8, 0.5}, 2);
    CHECK(m1.active == std::vector<bool>{true, false, true, false});
    CHECK(m1.weights == std::vector<double>{0.9, 0.0, 0.8, 0.0});

    auto m2 = select_hard({0.3, 0.6, 0.2}, 3);
    CHECK(m2.active == std::vector<bool>{true, true, true});
    CHECK(m2.weights == std::vector<double>{0.3, 0.6, 0.2});

    auto m3 = select_hard({0.4, 0.4, 0.4, 0.4}, 2);
    CHECK(m3.active == std::vector<bool>{true, true, false, false});

    CHECK_THROWS_AS(select_hard({0.1, 0.2}, 3), ContractError);
    CHECK_THROWS_AS(select_hard({0.1, 0.2}, 0), ContractError);
}

TEST_CASE("select_stochastic with zero slack equals select_hard bit for bit") {
    Rng base(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> scores(8);
        for (auto& s : scores) s = base.uniform();
        Rng r1(trial);
        CHECK(select_stochastic(scores, 3, 0, r1) == select_hard(scores, 3));
    }
}

TEST_CASE("select_stochastic samples subsets uniformly and stays inside the top set") {
    std::vector<double> scores{0.9, 0.7, 0.5, 0.2, 0.1};
    Rng rng(42);
    std::map<std::vector<bool>, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto mask = select_stochastic(scores, 2, 1, rng);
        CHECK(mask.active_count() == 2);
        // sampled indices always within the top-3
        CHECK_FALSE(mask.active[3]);
        CHECK_FALSE(mask.active[4]);
        counts[mask.active] += 1;
    }
    CHECK(counts.size() == 3);
    double chi2 = 0.0;
    for (const auto& [mask, n] : counts) {
        const double expected = draws / 3.0;
        CHECK(std::abs(n / static_cast<double>(draws) - 1.0 / 3.0) < 0.02);
        chi2 += (n - expected) * (n - expected) / expected;
    }
    CHECK(chi2 < 9.21); // chi-square critical value, 2 dof, p = 0.01
}

TEST_CASE("select_soft activates strictly above the threshold") {
    std::vector<std::array<double, 2>> pairs{{0.9, 0.1}, {0.4, 0.6}, {0.51, 0.49}};
    auto m = select_soft(pairs, 0.5);
    CHECK(m.active == std::vector<bool>{true, false, true});

    // boundary: exactly 0.5 does not activate
    std::vector<std::array<double, 2>> half{{0.5, 0.5}, {0.5, 0.5}};
    CHECK(select_soft(half, 0.5).active_count() == 0);

    // threshold 0 with positive scores activates everything
    CHECK(select_soft(pairs, 0.0).active_count() == 3);
}

TEST_CASE("aim_forward on zero input returns zero") {
    AimConfig cfg = small_config();
    Rng rng(5);
    AimParams p = AimParams::init(9, cfg, rng);
    Tensor z = Tensor::zeros({9});
    auto out = aim_apply(z, p, cfg, SelectionMode::Hard, rng);
    for (double v : out.value.data()) CHECK(v == 0.0);
}

TEST_CASE("aim_forward composes the attend example into a scaled identity") {
    AimConfig cfg;
    cfg.m = 1;
    cfg.k = 1;
    cfg.l = 0;
    cfg.d = 1;
    cfg.d_hidden = 1;
    cfg.d_out = 2;
    Rng rng(6);
    AimParams p = AimParams::init(2, cfg, rng);
    p.h[0].data() = {1.0};
    p.wq[0].data() = {1.0};
    p.wk.data() = {1.0, 0.0};
    p.wm[0].data() = {1.0, 0.0, 0.0, 1.0}; // identity, D = d_out = 2

    Tensor z = Tensor::from({1.0, 0.0}, {2});
    auto out = aim_apply(z, p, cfg, SelectionMode::Hard, rng);
    const double s = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(out.value.at(0) == doctest::Approx(s * 1.0).epsilon(1e-9));
    CHECK(out.value.at(1) == doctest::Approx(0.0));
}

TEST_CASE("permuting mechanisms together with their parameters leaves the output unchanged") {
    AimConfig cfg = small_config();
    cfg.l = 0;
    Rng rng(7);
    const std::size_t dim = 6;
    AimParams p = AimParams::init(dim, cfg, rng);
    Tensor z = Tensor::uniform({dim}, 1.0, rng);

    Rng r1(0), r2(0);
    auto base = aim_apply(z, p, cfg, SelectionMode::Hard, r1);

    // scores must be distinct so the tie-break cannot reorder the selection
    Attention att = attend(z, p);
    auto sv = att.score_values();
    std::sort(sv.begin(), sv.end());
    for (std::size_t i = 1; i < sv.size(); ++i) REQUIRE(sv[i] != sv[i - 1]);

    AimParams q = p;
    std::vector<std::size_t> perm{2, 0, 3, 1};
    for (std::size_t i = 0; i < perm.size(); ++i) {
        q.h[i] = p.h[perm[i]];
        q.wq[i] = p.wq[perm[i]];
        q.wm[i] = p.wm[perm[i]];
    }
    auto permuted = aim_apply(z, q, cfg, SelectionMode::Hard, r2);
    for (std::size_t i = 0; i < base.value.size(); ++i) {
        CHECK(std::abs(base.value.at(i) - permuted.value.at(i)) < 1e-12);
    }
}

TEST_CASE("inactive mechanisms receive bitwise-zero gradients") {
    AimConfig cfg = small_config();
    Rng rng(8);
    const std::size_t dim = 6;
    AimParams p = AimParams::init(dim, cfg, rng);
    Tensor z = Tensor::uniform({dim}, 1.0, rng);

    SelectionMask mask;
    {
        TapeScope scope;
        Attention att = attend(z, p);
        mask = select_hard(att.score_values(), cfg.k);
        Tensor out = aim_forward(z, mask, att, p);
        backward(sum(out));
    }
    for (std::size_t i = 0; i < cfg.m; ++i) {
        bool all_zero_wm = std::all_of(p.wm[i].grad().begin(), p.wm[i].grad().end(),
                                       [](double g) { return g == 0.0; });
        bool all_zero_h = std::all_of(p.h[i].grad().begin(), p.h[i].grad().end(),
                                      [](double g) { return g == 0.0; });
        if (mask.active[i]) {
            CHECK_FALSE(all_zero_wm);
        } else {
            CHECK(all_zero_wm);
            CHECK(all_zero_h); // hard gate: unselected scores carry no gradient
        }
    }
}

TEST_CASE("aim gradients match finite differences on a fixed mask") {
    AimConfig cfg = small_config();
    Rng rng(9);
    const std::size_t dim = 6;
    AimParams p = AimParams::init(dim, cfg, rng);
    Tensor z = Tensor::uniform({dim}, 1.0, rng);

    SelectionMask fixed;
    {
        NoGradScope ng;
        fixed = select_hard(attend(z, p).score_values(), cfg.k);
    }
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < cfg.m; ++i) {
        params.push_back(p.h[i]);
        params.push_back(p.wq[i]);
        if (fixed.active[i]) params.push_back(p.wm[i]);
    }
    params.push_back(p.wk);

    auto build = [&] {
        Attention att = attend(z, p);
        return sum(aim_forward(z, fixed, att, p));
    };
    CHECK(finite_diff_check(build, params) < 1e-5);
}

TEST_CASE("exact-K sparsity holds for hard and stochastic selection") {
    AimConfig cfg;
    cfg.m = 16;
    cfg.k = 5;
    cfg.l = 3;
    cfg.d = 4;
    cfg.d_hidden = 4;
    cfg.d_out = 4;
    Rng rng(10);
    AimParams p = AimParams::init(8, cfg, rng);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor z = Tensor::uniform({8}, 3.0, rng);
        Attention att = attend(z, p);
        CHECK(select_hard(att.score_values(), cfg.k).active_count() == cfg.k);
        CHECK(select_stochastic(att.score_values(), cfg.k, cfg.l, rng).active_count() == cfg.k);
    }
}

TEST_CASE("activation_mask matches select_hard and ignores the tape") {
    AimConfig cfg = small_config();
    cfg.k = cfg.m; // K = M: everything active
    cfg.l = 0;
    Rng rng(11);
    AimParams p = AimParams::init(5, cfg, rng);
    Tensor z = Tensor::uniform({5}, 1.0, rng);
    auto mask = activation_mask(z, p, cfg);
    CHECK(std::count(mask.begin(), mask.end(), true) == static_cast<long>(cfg.m));

    cfg.k = 2;
    TapeScope scope;
    auto m2 = activation_mask(z, p, cfg);
    CHECK(scope.tape().node_count() == 0); // analysis path records nothing
    Attention att = attend(z, p);
    CHECK(m2 == select_hard(att.score_values(), cfg.k).active);
}

TEST_CASE("config invariants are enforced") {
    AimConfig cfg = small_config();
    cfg.k = 3;
    cfg.l = 2; // K + l > M = 4
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = small_config();
    cfg.soft_threshold = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("csv rows carry sample, class, then one column per mechanism") {
    CHECK(mask_csv_row(3, 1, {true, false, true}) == "3,1,1,0,1");
    CHECK(scores_csv_row(0, 2, {0.5, 0.25}) == "0,2,0.5,0.25");
}
