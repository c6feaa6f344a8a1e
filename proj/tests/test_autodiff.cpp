#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "aimlab/tensor.hpp"

using namespace aimlab;

TEST_CASE("matmul identity and hand-computed product") {
    Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
    Tensor eye = Tensor::from({1, 0, 0, 1}, {2, 2});
    Tensor c = matmul(a, eye);
    CHECK(c.data() == std::vector<double>{1, 2, 3, 4});

    Tensor row = Tensor::from({1, 2}, {1, 2});
    Tensor col = Tensor::from({3, 4}, {2, 1});
    CHECK(matmul(row, col).item() == doctest::Approx(11.0));

    Tensor bad = Tensor::from({1, 2, 3}, {3, 1});
    CHECK_THROWS_AS(matmul(a, bad), DimensionError);
}

TEST_CASE("matmul gradient matches hand-derived value and finite differences") {
    Tensor a = Tensor::from({1, 1}, {1, 2}, true);
    Tensor b = Tensor::from({2, 5}, {2, 1});
    {
        TapeScope scope;
        Tensor loss = sum(matmul(a, b));
        backward(loss);
    }
    CHECK(a.grad()[0] == doctest::Approx(2.0));
    CHECK(a.grad()[1] == doctest::Approx(5.0));

    const Tensor params[] = {a};
    double err = finite_diff_check([&] { return sum(matmul(a, b)); }, params);
    CHECK(err < 1e-8);
}

TEST_CASE("softmax values") {
    Tensor flat = Tensor::from({0, 0}, {2});
    auto p = softmax(flat, 0).data();
    CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-12));

    Tensor onezero = Tensor::from({1, 0}, {2});
    auto q = softmax(onezero, 0).data();
    CHECK(q[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(q[1] == doctest::Approx(0.2689).epsilon(1e-4));

    Tensor extreme = Tensor::from({1000, 0}, {2});
    auto r = softmax(extreme, 0).data();
    CHECK(r[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r[1] < 1e-300);
}

TEST_CASE("softmax rows sum to one on rank-2 input") {
    Rng rng(7);
    Tensor t = Tensor::uniform({4, 3}, 2.0, rng);
    Tensor s = softmax(t, 1);
    for (std::size_t r = 0; r < 4; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 3; ++c) acc += s.at(r * 3 + c);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("conv2d examples") {
    Tensor x = Tensor::full({1, 3, 3}, 1.0);
    Tensor k = Tensor::from({2}, {1, 1, 1, 1});
    Tensor y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == std::vector<std::size_t>{1, 3, 3});
    for (double v : y.data()) CHECK(v == doctest::Approx(2.0));

    Tensor x2 = Tensor::from({1, 2, 3, 4}, {1, 2, 2});
    Tensor k2 = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y2 = conv2d(x2, k2, 1, 0);
    CHECK(y2.shape() == std::vector<std::size_t>{1, 1, 1});
    CHECK(y2.item() == doctest::Approx(10.0));

    // output size follows the floor rule
    Tensor x3 = Tensor::full({1, 28, 28}, 0.5);
    Tensor k3 = Tensor::full({8, 1, 3, 3}, 0.1);
    CHECK(conv2d(x3, k3, 2, 1).shape() == std::vector<std::size_t>{8, 14, 14});

    Tensor huge_kernel = Tensor::full({1, 1, 5, 5}, 1.0);
    CHECK_THROWS_AS(conv2d(x2, huge_kernel, 1, 0), DimensionError);
}

TEST_CASE("conv2d gradient against finite differences") {
    Rng rng(11);
    Tensor x = Tensor::uniform({2, 5, 5}, 1.0, rng, true);
    Tensor k = Tensor::uniform({3, 2, 3, 3}, 0.5, rng, true);
    const Tensor params[] = {x, k};
    double err = finite_diff_check([&] { return sum(conv2d(x, k, 2, 1)); }, params);
    CHECK(err < 1e-6);
}

TEST_CASE("elementwise examples") {
    CHECK(relu(Tensor::from({-1, 2}, {2})).data() == std::vector<double>{0, 2});

    auto n = l2_normalize(Tensor::from({3, 4}, {2})).data();
    CHECK(n[0] == doctest::Approx(0.6));
    CHECK(n[1] == doctest::Approx(0.8));

    long before = numeric_flags().zero_norm_events;
    auto z = l2_normalize(Tensor::zeros({3})).data();
    CHECK(z == std::vector<double>{0, 0, 0});
    CHECK(numeric_flags().zero_norm_events == before + 1);

    Tensor ce = cross_entropy(Tensor::from({0, 0}, {2}), 0);
    CHECK(ce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("elementwise shape mismatches raise dimension errors") {
    Tensor a = Tensor::zeros({2});
    Tensor b = Tensor::zeros({3});
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(sub(a, b), DimensionError);
    CHECK_THROWS_AS(mul(a, b), DimensionError);
}

TEST_CASE("backward basics") {
    Tensor p = Tensor::from({1, 2, 3}, {3}, true);
    {
        TapeScope scope;
        backward(sum(p));
    }
    CHECK(p.grad() == std::vector<double>{1, 1, 1});
    p.zero_grad();

    Tensor q = Tensor::from({2}, {1}, true);
    {
        TapeScope scope;
        backward(sum(mul(q, q)));
    }
    CHECK(q.grad() == std::vector<double>{4});

    // a parameter not reachable from the loss keeps an exactly-zero gradient
    Tensor unused = Tensor::from({5, 6}, {2}, true);
    Tensor r = Tensor::from({1}, {1}, true);
    {
        TapeScope scope;
        backward(sum(r));
    }
    CHECK(unused.grad() == std::vector<double>{0, 0});
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor p = Tensor::from({1, 2}, {2}, true);
    TapeScope scope;
    Tensor y = scale(p, 2.0);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("node reused twice accumulates both paths") {
    Tensor x = Tensor::from({3}, {1}, true);
    {
        TapeScope scope;
        backward(sum(add(x, x)));
    }
    CHECK(x.grad() == std::vector<double>{2});
}

TEST_CASE("gradient of a sum of losses equals sum of separate gradients") {
    Rng rng(3);
    Tensor p = Tensor::uniform({4}, 1.0, rng, true);
    Tensor w = Tensor::uniform({4, 2}, 1.0, rng);

    auto loss1 = [&] { return sum(relu(vecmat(p, w))); };
    auto loss2 = [&] { return sum(mul(p, p)); };

    std::vector<double> joint;
    {
        TapeScope scope;
        backward(add(loss1(), loss2()));
        joint = p.grad();
    }
    p.zero_grad();
    std::vector<double> separate(4, 0.0);
    {
        TapeScope scope;
        backward(loss1());
    }
    for (std::size_t i = 0; i < 4; ++i) separate[i] += p.grad()[i];
    p.zero_grad();
    {
        TapeScope scope;
        backward(loss2());
    }
    for (std::size_t i = 0; i < 4; ++i) separate[i] += p.grad()[i];

    for (std::size_t i = 0; i < 4; ++i) CHECK(joint[i] == doctest::Approx(separate[i]).epsilon(1e-12));
}

TEST_CASE("finite_diff_check is near-exact for a linear function") {
    Tensor p = Tensor::from({1.5, -2.0, 0.25}, {3}, true);
    Tensor c = Tensor::from({2, 3, 4}, {3});
    const Tensor params[] = {p};
    double err = finite_diff_check([&] { return sum(mul(p, c)); }, params);
    CHECK(err < 1e-10);
}

TEST_CASE("every primitive passes finite-difference checks at random points") {
    Rng rng(12345);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = Tensor::uniform({3, 4}, 1.0, rng, true);
        Tensor b = Tensor::uniform({4, 2}, 1.0, rng, true);
        Tensor v = Tensor::uniform({4}, 1.0, rng, true);
        Tensor u = Tensor::uniform({4}, 1.0, rng, true);
        Tensor s = Tensor::scalar(rng.uniform(0.5, 1.5), true);
        Tensor img = Tensor::uniform({2, 6, 6}, 1.0, rng, true);
        Tensor ker = Tensor::uniform({2, 2, 3, 3}, 0.5, rng, true);
        const Tensor params[] = {a, b, v, u, s, img, ker};

        auto build = [&] {
            Tensor m = matmul(a, b);                       // matmul
            Tensor soft = softmax(flatten(m), 0);          // softmax, flatten
            Tensor t1 = take(soft, 2);                     // take
            Tensor cv = conv2d(img, ker, 2, 1);            // conv2d
            Tensor fc = flatten(cv);
            Tensor r = relu(fc);                           // relu
            Tensor piece = concat(l2_normalize(v), u);     // l2_normalize, concat
            Tensor mixed = add(sub(mul(v, u), scale(u, 0.5)), scale(v, s)); // add/sub/mul/scale
            Tensor logits = concat(dot(v, u), take(fc, 0));
            Tensor ce = cross_entropy(logits, 1);          // cross_entropy
            Tensor total = add(add(mean(r), sum(mixed)), add(add(t1, ce), mean(piece)));
            return total;
        };
        worst = std::max(worst, finite_diff_check(build, params));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("sgd update is exactly p minus step size times gradient") {
    Tensor p = Tensor::from({1.0, 2.0}, {2}, true);
    {
        TapeScope scope;
        backward(sum(mul(p, p))); // grad = 2p
    }
    SgdOptimizer opt{0.1};
    opt.step(p);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 * 2.0));
    CHECK(p.data()[1] == doctest::Approx(2.0 - 0.1 * 4.0));
}

TEST_CASE("identical seeds produce bit-identical tensors") {
    auto run = [] {
        Rng rng(99);
        Tensor w = Tensor::uniform({8, 8}, 0.5, rng, true);
        Tensor x = Tensor::uniform({8}, 1.0, rng);
        TapeScope scope;
        Tensor y = relu(vecmat(x, w));
        backward(sum(y));
        SgdOptimizer{0.05}.step(w);
        return w.data();
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite inputs are rejected") {
    CHECK_THROWS_AS(Tensor::from({std::nan("")}, {1}), NumericError);
}
