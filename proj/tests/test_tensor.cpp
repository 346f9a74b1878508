#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "ulact/tensor.hpp"

using namespace ulact;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, bool requires_grad = true,
                             double scl = 1.0) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : data) x = rng.next_normal() * scl;
    return Tensor<double>::leaf(std::move(shape), std::move(data), requires_grad);
}

// Scalar functional of an op output: sum(out * c) with a fixed random probe c,
// so every output coordinate enters the loss with a generic weight.
Tensor<double> probe_loss(Tape<double>& tape, const Tensor<double>& out, const Tensor<double>& c) {
    return sum(tape, mul(tape, out, c));
}

}  // namespace

TEST_CASE("matmul identity and shape errors") {
    Tape<double> tape;
    auto a = Tensor<double>::leaf({2, 2}, {1, 2, 3, 4}, false);
    auto eye = Tensor<double>::leaf({2, 2}, {1, 0, 0, 1}, false);
    auto y = matmul(tape, a, eye);
    CHECK(y.value() == std::vector<double>{1, 2, 3, 4});

    auto bad = Tensor<double>::zeros({3, 2});
    CHECK_THROWS_WITH_AS(matmul(tape, a, bad), doctest::Contains("[2x2] vs [3x2]"),
                         std::invalid_argument);
}

TEST_CASE("softmax symmetry and uniform cross entropy") {
    Tape<double> tape;
    auto x = Tensor<double>::leaf({1, 2}, {0, 0}, false);
    auto y = softmax(tape, x);
    CHECK(y.value()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(0.5).epsilon(1e-12));

    auto logits = Tensor<double>::zeros({1, 8});
    auto ce = cross_entropy_logits(tape, logits, {3});
    CHECK(ce.item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("backward of x^2 at x=3 gives 6") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(3.0, true);
    auto y = mul(tape, x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("grad of sum(matmul(A,B)) equals ones * B^T") {
    RngStream rng(7, "test/matmul_grad");
    Tape<double> tape;
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    auto loss = sum(tape, matmul(tape, a, b));
    tape.backward(loss);
    // dA[i,p] = sum_j B[p,j]
    for (int i = 0; i < 3; ++i)
        for (int p = 0; p < 4; ++p) {
            double expect = 0;
            for (int j = 0; j < 5; ++j) expect += b.value()[static_cast<std::size_t>(p) * 5 + j];
            CHECK(a.grad()[static_cast<std::size_t>(i) * 4 + p] ==
                  doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("leaf not used by the loss keeps zero grad") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(2.0, true);
    auto y = Tensor<double>::scalar(5.0, true);
    auto z = mul(tape, y, y);  // y is on the tape but not under the loss
    (void)z;
    auto loss = mul(tape, x, x);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(y.grad()[0] == 0.0);
}

TEST_CASE("repeated backward accumulates") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(3.0, true);
    auto loss = mul(tape, x, x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("non-scalar loss rejected") {
    Tape<double> tape;
    auto x = Tensor<double>::leaf({2}, {1, 2}, true);
    auto y = add(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("gradient accumulation is linear in the loss") {
    RngStream rng(11, "test/linearity");
    const double a = 1.7, b = -0.4;

    auto run = [&](double wa, double wb) {
        RngStream r2(11, "test/linearity");
        Tape<double> tape;
        auto x = random_tensor({4, 4}, r2);
        auto l1 = mse_loss(tape, x, Tensor<double>::zeros({4, 4}));
        auto l2 = sum(tape, gelu(tape, x));
        auto loss = add(tape, scale(tape, l1, wa), scale(tape, l2, wb));
        tape.backward(loss);
        return x.grad();
    };

    auto g_combined = run(a, b);
    auto g1 = run(1.0, 0.0);
    auto g2 = run(0.0, 1.0);
    for (std::size_t i = 0; i < g_combined.size(); ++i)
        CHECK(g_combined[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-10));
}

TEST_CASE("forward replay is bit-identical") {
    auto run = [] {
        RngStream rng(42, "test/replay");
        Tape<double> tape;
        auto x = random_tensor({6, 6}, rng);
        auto w = random_tensor({6, 6}, rng);
        auto g = Tensor<double>::full({6}, 1.0, true);
        auto bta = Tensor<double>::zeros({6}, true);
        auto y = gelu(tape, layer_norm(tape, matmul(tape, x, w), g, bta));
        return softmax(tape, y).value();
    };
    CHECK(run() == run());
}

TEST_CASE("ste passthrough forwards quantized values and routes grad to continuous") {
    Tape<double> tape;
    auto q = Tensor<double>::leaf({3}, {1, 2, 3}, true);
    auto z = Tensor<double>::leaf({3}, {0.9, 2.2, 2.7}, true);
    auto e = ste_passthrough(tape, q, z);
    CHECK(e.value() == q.value());
    auto c = Tensor<double>::leaf({3}, {0.5, -1.0, 2.0}, false);
    auto loss = sum(tape, mul(tape, e, c));
    tape.backward(loss);
    CHECK(z.grad() == std::vector<double>{0.5, -1.0, 2.0});
    CHECK(q.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("adamw") {
    SUBCASE("zero grad and zero weight decay leave params unchanged") {
        auto p = Tensor<double>::leaf({3}, {1, 2, 3}, true);
        std::vector<Tensor<double>> params{p};
        AdamW<double> opt;
        opt.hp.lr = 0.1;
        opt.hp.weight_decay = 0.0;
        opt.step(params);
        CHECK(p.value() == std::vector<double>{1, 2, 3});
    }

    SUBCASE("single step matches hand arithmetic") {
        auto p = Tensor<double>::scalar(1.0, true);
        p.grad()[0] = 0.5;
        std::vector<Tensor<double>> params{p};
        AdamW<double> opt;
        opt.hp = {0.1, 0.9, 0.999, 1e-8, 0.1};
        opt.step(params);
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25
        const double mhat = 0.05 / (1 - 0.9);
        const double vhat = 0.00025 / (1 - 0.999);
        const double expect = 1.0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.1 * 1.0);
        CHECK(p.value()[0] == doctest::Approx(expect).epsilon(1e-15));
    }

    SUBCASE("identical params with identical grads update identically") {
        auto p1 = Tensor<double>::leaf({2}, {0.3, -0.7}, true);
        auto p2 = Tensor<double>::leaf({2}, {0.3, -0.7}, true);
        p1.grad() = {0.1, -0.2};
        p2.grad() = {0.1, -0.2};
        std::vector<Tensor<double>> params{p1, p2};
        AdamW<double> opt;
        opt.hp.weight_decay = 0.01;
        opt.step(params);
        CHECK(p1.value() == p2.value());
    }

    SUBCASE("param without grad buffer rejected") {
        auto p = Tensor<double>::leaf({1}, {1.0}, false);
        std::vector<Tensor<double>> params{p};
        AdamW<double> opt;
        CHECK_THROWS_AS(opt.step(params), std::invalid_argument);
    }
}

TEST_CASE("finite_diff_check basics") {
    SUBCASE("x^2 at x=3") {
        auto x = Tensor<double>::scalar(3.0, true);
        std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x}};
        RngStream rng(1, "test/fd");
        auto rep = finite_diff_check<double>(
            [&](Tape<double>& t) { return mul(t, x, x); }, params, 8, 1e-5, rng);
        CHECK(rep.all_finite);
        CHECK(rep.max_rel_err < 1e-8);
    }

    SUBCASE("constant function has zero analytic and numeric grads") {
        auto x = Tensor<double>::scalar(3.0, true);
        std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x}};
        RngStream rng(2, "test/fd");
        auto rep = finite_diff_check<double>(
            [&](Tape<double>& t) {
                auto c = Tensor<double>::scalar(7.0, false);
                auto used = add(t, x, Tensor<double>::scalar(0.0, false));
                (void)used;
                return mul(t, c, c);
            },
            params, 8, 1e-5, rng);
        CHECK(rep.all_finite);
        CHECK(rep.max_rel_err == 0.0);
        CHECK(x.grad()[0] == 0.0);
    }

    SUBCASE("non-positive eps rejected") {
        auto x = Tensor<double>::scalar(1.0, true);
        std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x}};
        RngStream rng(3, "test/fd");
        CHECK_THROWS_AS(finite_diff_check<double>(
                            [&](Tape<double>& t) { return mul(t, x, x); }, params, 1, 0.0, rng),
                        std::invalid_argument);
    }
}

// Central-difference check of every differentiable primitive. ste_passthrough
// is excluded: its backward is a definition, not a local derivative, and is
// covered by its own identity test above.
TEST_CASE("every primitive passes the finite difference check") {
    RngStream master(2024, "test/primitive_fd");

    auto check = [&](const std::string& name,
                     std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)> build,
                     std::vector<Shape> param_shapes) {
        CAPTURE(name);
        RngStream init = master.split(name);
        std::vector<Tensor<double>> ps;
        std::vector<std::pair<std::string, Tensor<double>>> named;
        for (std::size_t i = 0; i < param_shapes.size(); ++i) {
            ps.push_back(random_tensor(param_shapes[i], init));
            named.emplace_back(name + "/p" + std::to_string(i), ps.back());
        }
        RngStream sample = master.split(name + "/coords");
        auto rep = finite_diff_check<double>(
            [&](Tape<double>& t) { return build(t, ps); }, named, 64, 1e-5, sample);
        CHECK(rep.all_finite);
        CHECK(rep.max_rel_err < 1e-4);
    };

    RngStream probes(77, "test/probes");
    auto c23 = random_tensor({2, 3}, probes, false);
    auto c34 = random_tensor({3, 4}, probes, false);
    auto c43 = random_tensor({4, 3}, probes, false);
    auto c63 = random_tensor({6, 3}, probes, false);
    auto c448 = random_tensor({4, 48}, probes, false);
    auto cfrm = random_tensor({3, 8, 8}, probes, false);
    auto c44 = random_tensor({4, 4}, probes, false);

    check("matmul",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, matmul(t, p[0], p[1]), c34);
          },
          {{3, 2}, {2, 4}});
    check("add",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, add(t, p[0], p[1]), c34);
          },
          {{3, 4}, {3, 4}});
    check("add_bias",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, add_bias(t, p[0], p[1]), c34);
          },
          {{3, 4}, {4}});
    check("mul",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, mul(t, p[0], p[1]), c34);
          },
          {{3, 4}, {3, 4}});
    check("scale",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, scale(t, p[0], -1.37), c34);
          },
          {{3, 4}});
    check("concat_rows",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, concat(t, {p[0], p[1]}, 0), c63);
          },
          {{2, 3}, {4, 3}});
    check("concat_cols",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, concat(t, {p[0], p[1]}, 1), c34);
          },
          {{3, 1}, {3, 3}});
    check("slice",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, slice(t, p[0], {1, 2}, {2, 3}), c23);
          },
          {{4, 6}});
    check("reshape",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, reshape(t, p[0], {3, 4}), c34);
          },
          {{4, 3}});
    check("transpose",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, transpose(t, p[0]), c43);
          },
          {{3, 4}});
    check("softmax",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, softmax(t, p[0]), c34);
          },
          {{3, 4}});
    check("layer_norm",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, layer_norm(t, p[0], p[1], p[2]), c34);
          },
          {{3, 4}, {4}, {4}});
    check("gelu",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, gelu(t, p[0]), c34);
          },
          {{3, 4}});
    check("embedding",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, embedding(t, p[0], {1, 0, 4, 1}), c44);
          },
          {{5, 4}});
    check("patchify",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, patchify(t, p[0], 4), c448);
          },
          {{3, 8, 8}});
    check("unpatchify",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return probe_loss(t, unpatchify(t, p[0], 3, 8, 4), cfrm);
          },
          {{4, 48}});
    check("sum",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) { return sum(t, p[0]); }, {{3, 4}});
    check("mean",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) { return mean(t, p[0]); }, {{3, 4}});
    check("mse_loss",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return mse_loss(t, p[0], p[1]);
          },
          {{3, 4}, {3, 4}});
    check("l1_loss",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return l1_loss(t, p[0], p[1]);
          },
          {{3, 4}, {3, 4}});
    check("cross_entropy",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              return cross_entropy_logits(t, p[0], {2, 0, 5});
          },
          {{3, 6}});
    check("bce",
          [&](Tape<double>& t, std::vector<Tensor<double>>& p) {
              auto targets = Tensor<double>::leaf({4}, {1, 0, 1, 0}, false);
              return bce_logits(t, p[0], targets);
          },
          {{4}});
}

TEST_CASE("param store draws are order independent and seed deterministic") {
    ParamStore<double> a(99);
    auto w1 = a.normal("w1", {3, 3}, 0.02);
    auto w2 = a.normal("w2", {3, 3}, 0.02);

    ParamStore<double> b(99);
    auto w2b = b.normal("w2", {3, 3}, 0.02);  // reversed creation order
    auto w1b = b.normal("w1", {3, 3}, 0.02);

    CHECK(w1.value() == w1b.value());
    CHECK(w2.value() == w2b.value());
    CHECK(w1.value() != w2.value());
}

TEST_CASE("rng streams") {
    SUBCASE("same seed and name reproduce") {
        RngStream a(5, "episodes");
        RngStream b(5, "episodes");
        for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    }
    SUBCASE("different names are distinct") {
        RngStream a(5, "episodes");
        RngStream b(5, "batches");
        int same = 0;
        for (int i = 0; i < 64; ++i) same += (a.next_u64() == b.next_u64());
        CHECK(same == 0);
    }
    SUBCASE("state round trip") {
        RngStream a(5, "x");
        a.next_normal();
        auto st = a.state();
        RngStream b;
        b.restore(st);
        for (int i = 0; i < 10; ++i) CHECK(a.next_normal() == b.next_normal());
    }
    SUBCASE("unit interval and mean sanity") {
        RngStream a(5, "unit");
        double acc = 0;
        for (int i = 0; i < 10000; ++i) {
            double u = a.next_unit();
            CHECK(u >= 0.0);
            CHECK(u < 1.0);
            acc += u;
        }
        CHECK(acc / 10000 == doctest::Approx(0.5).epsilon(0.02));
    }
}
