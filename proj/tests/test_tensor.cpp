#include <doctest.h>

#include <cmath>
#include <cstring>

#include "sagekeep/tensor.hpp"
#include "support.hpp"

using namespace sagekeep;
using sktest::check_gradients;
using sktest::random_tensor;

TEST_CASE("elementwise basics") {
    const Tensor a = Tensor::from_data({2}, {1, 2});
    const Tensor b = Tensor::from_data({2}, {3, 4});
    CHECK(mul(a, b).values() == std::vector<double>{3, 8});

    Rng rng(1);
    const Tensor x = random_tensor({3, 4}, rng);
    const Tensor same = add(x, Tensor::zeros(x.shape()));
    CHECK(std::memcmp(same.data(), x.data(), x.size() * sizeof(double)) == 0);

    CHECK(scalar_mul(Tensor::from_data({2}, {0.5, -0.5}), 2.0).values() ==
          std::vector<double>{1, -1});
    CHECK(sub(b, a).values() == std::vector<double>{2, 2});
    CHECK(scalar_add(a, 1.0).values() == std::vector<double>{2, 3});
}

TEST_CASE("elementwise shape mismatch names both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_WITH_AS(mul(a, b), doctest::Contains("[2x3]"), DataError);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3x2]"), DataError);
}

TEST_CASE("tensor construction guards") {
    CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, std::nan("")}), NumericError);
    CHECK_THROWS_AS(Tensor::from_data({2}, {1.0}), DataError);
    CHECK_THROWS_AS(Tensor::zeros({0}), DataError);
    CHECK_THROWS_AS(Tensor::zeros({1, 1, 1, 1, 1}), DataError);
}

TEST_CASE("sigmoid values and saturation") {
    CHECK(sigmoid(Tensor::scalar(0.0)).value() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sigmoid(Tensor::scalar(40.0)).value() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sigmoid(Tensor::scalar(-745.0)).value() >= 0.0);  // no overflow either way
    CHECK(all_finite(sigmoid(Tensor::scalar(-745.0))));
}

TEST_CASE("sigmoid gradient matches finite differences") {
    auto fn = [](std::vector<Tensor>& in, Tape*) { return sum(sigmoid(in[0])); };
    const auto res = check_gradients({Tensor::scalar(1.0)}, fn);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("clamp semantics") {
    const Tensor t = Tensor::from_data({3}, {-0.2, 0.5, 1.3});
    CHECK(clamp(t, 0, 1).values() == std::vector<double>{0, 0.5, 1});
    const Tensor inside = Tensor::from_data({3}, {0.1, 0.5, 0.9});
    CHECK(clamp(inside, 0, 1).values() == inside.values());
    CHECK_THROWS_AS(clamp(t, 1.0, 1.0), DataError);

    // out-of-range subgradient is zero
    Tape tape;
    Tensor x = tape.leaf(Tensor::scalar(1.3));
    Tensor loss = sum(clamp(x, 0, 1));
    const Tensor g = backward(tape, loss).wrt(x);
    CHECK(g.value() == 0.0);
}

TEST_CASE("relu") {
    CHECK(relu(Tensor::from_data({3}, {-1, 0, 2})).values() == std::vector<double>{0, 0, 2});
    Rng rng(7);
    const Tensor x = random_tensor({4, 4}, rng);
    CHECK(relu(relu(x)).values() == relu(x).values());

    Tape tape;
    Tensor t = tape.leaf(Tensor::scalar(-1.0));
    const Tensor g = backward(tape, sum(relu(t))).wrt(t);
    CHECK(g.value() == 0.0);
}

TEST_CASE("l1 norm") {
    CHECK(l1_norm(Tensor::from_data({3}, {1, -2, 0})).value() == 3.0);
    Tape tape;
    Tensor z = tape.leaf(Tensor::zeros({4}));
    Tensor loss = l1_norm(z);
    CHECK(loss.value() == 0.0);
    CHECK(backward(tape, loss).wrt(z).values() == std::vector<double>{0, 0, 0, 0});

    Tape tape2;
    Tensor t = tape2.leaf(Tensor::from_data({2}, {-2, 3}));
    CHECK(backward(tape2, l1_norm(t)).wrt(t).values() == std::vector<double>{-1, 1});
}

TEST_CASE("l1 norm nonnegative, zero iff zero input") {
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        const Tensor x = random_tensor({5}, rng);
        const double v = l1_norm(x).value();
        CHECK(v >= 0.0);
        bool zero_input = true;
        for (std::size_t j = 0; j < x.size(); ++j) zero_input &= x[j] == 0.0;
        CHECK((v == 0.0) == zero_input);
    }
}

TEST_CASE("upsample nearest replication and identity") {
    const Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor up = upsample_nearest(t, 2, 2);
    CHECK(up.shape() == std::vector<std::size_t>{4, 4});
    CHECK(up.values() ==
          std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    CHECK(upsample_nearest(t, 1, 1).values() == t.values());
}

TEST_CASE("upsample backward block-sums") {
    Tape tape;
    Tensor t = tape.leaf(Tensor::from_data({2, 2}, {1, 2, 3, 4}));
    Tensor loss = sum(upsample_nearest(t, 2, 2));
    CHECK(backward(tape, loss).wrt(t).values() == std::vector<double>{4, 4, 4, 4});
}

TEST_CASE("upsample then block-mean pooling is the identity on the coarse grid") {
    Rng rng(3);
    const Tensor t = random_tensor({3, 5}, rng);
    const std::size_t f = 3;
    const Tensor up = upsample_nearest(t, f, f);
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 5; ++x) {
            double acc = 0;
            for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx) acc += up.at(y * f + dy, x * f + dx);
            CHECK(acc / static_cast<double>(f * f) == doctest::Approx(t.at(y, x)).epsilon(1e-12));
        }
}

TEST_CASE("repeat_channel forward and backward") {
    const Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const Tensor r = repeat_channel(t, 3);
    CHECK(r.shape() == std::vector<std::size_t>{3, 2, 2});
    CHECK(r.at(2, 1, 0) == 3.0);

    Tape tape;
    Tensor tr = tape.leaf(t);
    Tensor loss = sum(repeat_channel(tr, 3));
    CHECK(backward(tape, loss).wrt(tr).values() == std::vector<double>{3, 3, 3, 3});
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(5);
    const Tensor x = random_tensor({2, 4, 4}, rng, 0.0, 1.0);
    Tensor w = Tensor::zeros({2, 2, 1, 1});
    w[0 * 2 + 0] = 1.0;            // out0 <- in0
    w[1 * 2 + 1] = 1.0;            // out1 <- in1
    const Tensor y = conv2d(x, w, Tensor::zeros({2}));
    CHECK(y.values() == x.values());
}

TEST_CASE("conv2d 3x3 ones on a one-hot input gives a plateau") {
    Tensor x = Tensor::zeros({1, 5, 5});
    x[2 * 5 + 2] = 1.0;
    const Tensor y = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) {
            const bool in_plateau = r >= 1 && r <= 3 && c >= 1 && c <= 3;
            CHECK(y.at(0, r, c) == (in_plateau ? 1.0 : 0.0));
        }
}

TEST_CASE("conv2d validates") {
    const Tensor x = Tensor::zeros({2, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1})), DataError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1})), DataError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({2})), DataError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(17);
    const Tensor x = random_tensor({2, 4, 4}, rng);
    const Tensor w = random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
    const Tensor b = random_tensor({2}, rng, -0.5, 0.5);
    auto fn = [](std::vector<Tensor>& in, Tape*) {
        return sum(conv2d(in[0], in[1], in[2]));
    };
    const auto res = check_gradients({x, w, b}, fn);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("seg_losses saturated and uniform cases") {
    // strongly correct logits: ce ~ 0, soft dice ~ 0
    Tensor logits = Tensor::zeros({2, 2, 2});
    Tensor labels = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    for (std::size_t px = 0; px < 4; ++px) {
        const std::size_t cls = static_cast<std::size_t>(labels[px]);
        logits[cls * 4 + px] = 20.0;
        logits[(1 - cls) * 4 + px] = -20.0;
    }
    const SegLosses sat = seg_losses(logits, labels);
    CHECK(sat.ce.value() < 1e-8);
    CHECK(sat.soft_dice.value() < 1e-6);

    const SegLosses uni = seg_losses(Tensor::zeros({2, 3, 3}), Tensor::zeros({3, 3}));
    CHECK(uni.ce.value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("seg_losses rejects out-of-range labels") {
    CHECK_THROWS_AS(seg_losses(Tensor::zeros({2, 2, 2}), Tensor::full({2, 2}, 2.0)), DataError);
    CHECK_THROWS_AS(seg_losses(Tensor::zeros({2, 2, 2}), Tensor::full({2, 2}, 0.5)), DataError);
}

TEST_CASE("seg_losses gradient matches finite differences") {
    Rng rng(23);
    const Tensor logits = random_tensor({2, 4, 4}, rng);
    const Tensor labels = sktest::random_labels(4, 4, 2, rng);
    auto fn = [&labels](std::vector<Tensor>& in, Tape*) {
        SegLosses l = seg_losses(in[0], labels);
        return add(l.ce, l.soft_dice);
    };
    const auto res = check_gradients({logits}, fn, 1e-5);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("weighted_ce reduces to ce under unit weights") {
    Rng rng(29);
    const Tensor logits = random_tensor({3, 4, 4}, rng);
    const Tensor labels = sktest::random_labels(4, 4, 3, rng);
    const double plain = seg_losses(logits, labels).ce.value();
    const double weighted = weighted_ce(logits, labels, Tensor::full({4, 4}, 1.0)).value();
    CHECK(weighted == doctest::Approx(plain).epsilon(1e-12));

    auto fn = [&labels](std::vector<Tensor>& in, Tape*) {
        Tensor w = Tensor::full({4, 4}, 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i % 3) * 0.5;
        return weighted_ce(in[0], labels, w);
    };
    CHECK(check_gradients({logits}, fn).max_rel_err < 1e-5);
}

TEST_CASE("backward basics") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::from_data({3}, {1, 2, 3}));
    Tensor root = sum(x);
    CHECK(backward(tape, root).wrt(x).values() == std::vector<double>{1, 1, 1});

    // disconnected parameter gets zeros
    Tensor y = tape.leaf(Tensor::from_data({2}, {5, 6}));
    Tensor root2 = sum(x);
    CHECK(backward(tape, root2).wrt(y).values() == std::vector<double>{0, 0});

    // root must be a tracked scalar on this tape
    Tape other;
    CHECK_THROWS_AS(backward(other, root), DataError);
    CHECK_THROWS_AS(backward(tape, Tensor::scalar(1.0)), DataError);
    CHECK_THROWS_AS(backward(tape, x), DataError);
}

TEST_CASE("backward through l1(sigmoid(G/T)) matches finite differences") {
    Rng rng(31);
    Tensor g = random_tensor({3, 3}, rng);
    sktest::push_away_from(g, 0.0, 1e-3);  // keep |G| clear of the l1 kink after sigmoid shift
    auto fn = [](std::vector<Tensor>& in, Tape*) {
        return l1_norm(sigmoid(scalar_mul(in[0], 1.0 / 0.7)));
    };
    CHECK(check_gradients({g}, fn).max_rel_err < 1e-5);
}

TEST_CASE("tape evaluation is deterministic") {
    Rng rng(37);
    const Tensor x = random_tensor({2, 6, 6}, rng);
    const Tensor w = random_tensor({3, 2, 3, 3}, rng);
    const Tensor b = random_tensor({3}, rng);
    auto run = [&]() {
        Tape tape;
        Tensor xt = tape.leaf(x);
        Tensor out = sum(relu(conv2d(xt, w, b)));
        Gradients g = backward(tape, out);
        return std::make_pair(out.value(), g.wrt(xt).values());
    };
    const auto a = run();
    const auto b2 = run();
    CHECK(a.first == b2.first);
    CHECK(a.second == b2.second);
}

TEST_CASE("adam fixed point and first step") {
    Tensor p = Tensor::scalar(0.7);
    AdamState st(p.shape(), 0.1);
    for (int i = 0; i < 5; ++i) adam_step(p, Tensor::scalar(0.0), st);
    CHECK(p.value() == 0.7);
    CHECK(st.t == 5);

    Tensor q = Tensor::scalar(0.0);
    AdamState st2(q.shape(), 0.1);
    adam_step(q, Tensor::scalar(1.0), st2);
    CHECK(std::abs(q.value() + 0.1) < 1e-6);  // bias correction makes the first step ~ lr
}

TEST_CASE("adam converges on a 1-d quadratic") {
    Tensor p = Tensor::scalar(0.0);
    AdamState st(p.shape(), 0.1);
    for (int i = 0; i < 500; ++i) {
        const Tensor grad = Tensor::scalar(2.0 * (p.value() - 3.0));
        adam_step(p, grad, st);
    }
    CHECK(std::abs(p.value() - 3.0) < 1e-2);
}

TEST_CASE("adam validates shapes") {
    Tensor p = Tensor::zeros({2, 2});
    AdamState st(p.shape(), 0.1);
    CHECK_THROWS_AS(adam_step(p, Tensor::zeros({3}), st), DataError);
}

TEST_CASE("gradient suite over randomized instances for every op") {
    Rng rng(101);
    for (int trial = 0; trial < 12; ++trial) {
        // add / sub / mul / scalar ops
        {
            const Tensor a = random_tensor({3, 3}, rng);
            const Tensor b = random_tensor({3, 3}, rng);
            auto fn = [](std::vector<Tensor>& in, Tape*) {
                Tensor mixed = mul(add(in[0], in[1]), sub(in[0], in[1]));
                return sum(scalar_add(scalar_mul(mixed, 1.7), 0.3));
            };
            CHECK(check_gradients({a, b}, fn).max_rel_err < 1e-4);
        }
        // sigmoid
        {
            const Tensor a = random_tensor({4}, rng);
            auto fn = [](std::vector<Tensor>& in, Tape*) { return sum(sigmoid(in[0])); };
            CHECK(check_gradients({a}, fn).max_rel_err < 1e-4);
        }
        // clamp / relu away from kinks
        {
            Tensor a = random_tensor({5}, rng);
            sktest::push_away_from(a, 0.0, 1e-3);
            sktest::push_away_from(a, 1.0, 1e-3);
            auto fn = [](std::vector<Tensor>& in, Tape*) {
                return sum(add(clamp(in[0], 0.0, 1.0), relu(in[0])));
            };
            CHECK(check_gradients({a}, fn).max_rel_err < 1e-4);
        }
        // l1 away from zero
        {
            Tensor a = random_tensor({6}, rng);
            sktest::push_away_from(a, 0.0, 1e-3);
            auto fn = [](std::vector<Tensor>& in, Tape*) { return l1_norm(in[0]); };
            CHECK(check_gradients({a}, fn).max_rel_err < 1e-4);
        }
        // upsample + repeat_channel
        {
            const Tensor a = random_tensor({2, 3}, rng);
            auto fn = [](std::vector<Tensor>& in, Tape*) {
                return sum(upsample_nearest(repeat_channel(in[0], 2), 2, 3));
            };
            CHECK(check_gradients({a}, fn).max_rel_err < 1e-4);
        }
    }
}
