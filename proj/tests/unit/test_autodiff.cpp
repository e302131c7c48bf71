#include <doctest.h>

#include "regmae/autodiff/checkpoint.hpp"
#include "regmae/autodiff/optim.hpp"
#include "../common/gradcheck.hpp"

using namespace regmae;
using namespace regmae::ad;
using T = Tensor<double>;
using V = Var<double>;

namespace {

using testing::gradient_error;

T rnd(Rng& rng, Shape s, double scale = 1.0) { return testing::random_tensor(rng, std::move(s), scale); }

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    const auto a = rnd(rng, {3, 4}), b = rnd(rng, {3, 4}), row = rnd(rng, {4});
    CHECK(gradient_error({a, b}, [](auto&, auto& v) { return add(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, row}, [](auto&, auto& v) { return add(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, b}, [](auto&, auto& v) { return sub(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, row}, [](auto&, auto& v) { return sub(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, b}, [](auto&, auto& v) { return mul(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, row}, [](auto&, auto& v) { return mul(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return scale(v[0], -2.5); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return neg(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return exp(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return sigmoid(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return silu(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return softplus(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto&, auto& v) { return gelu(v[0]); }) < 1e-6);
  }

  TEST_CASE("linear algebra and shape ops match finite differences") {
    Rng rng(2);
    const auto x = rnd(rng, {5, 3}), w = rnd(rng, {3, 4}), bias = rnd(rng, {4});
    CHECK(gradient_error({x, w}, [](auto&, auto& v) { return matmul(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({x, w, bias}, [](auto&, auto& v) { return linear(v[0], v[1], std::optional(v[2])); }) < 1e-6);
    CHECK(gradient_error({rnd(rng, {2, 5, 3}), w}, [](auto&, auto& v) { return linear(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return transpose(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return reshape(v[0], {3, 5}); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return sum(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return mean(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return sum_sq(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return mean_rows(v[0]); }) < 1e-6);
  }

  TEST_CASE("softmax and layernorm match finite differences") {
    Rng rng(3);
    const auto x = rnd(rng, {4, 6}, 2.0);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return softmax(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return softmax(v[0], 0); }) < 1e-6);
    CHECK(gradient_error({rnd(rng, {2, 3, 4})}, [](auto&, auto& v) { return softmax(v[0], 1); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto&, auto& v) { return layernorm(v[0]); }) < 1e-6);
    CHECK(gradient_error({x, rnd(rng, {6}), rnd(rng, {6})}, [](auto&, auto& v) {
            return layernorm(v[0], std::optional(v[1]), std::optional(v[2]));
          }) < 1e-6);
  }

  TEST_CASE("index ops match finite differences") {
    Rng rng(4);
    const auto x = rnd(rng, {5, 3});
    const auto idx = make_index({4, 0, 0, 2});
    CHECK(gradient_error({x}, [&](auto&, auto& v) { return gather_rows(v[0], idx); }) < 1e-6);
    CHECK(gradient_error({rnd(rng, {4, 3})}, [&](auto&, auto& v) { return scatter_rows(v[0], make_index({6, 1, 3, 0}), 7); }) <
          1e-6);
    const auto flat = make_index({14, 2, 2, 7, 0, 9});
    CHECK(gradient_error({x}, [&](auto&, auto& v) { return gather(v[0], flat, {2, 3}); }) < 1e-6);
    auto holes = std::make_shared<const std::vector<bool>>(std::vector<bool>{false, true, false, true, true});
    CHECK(gradient_error({x, rnd(rng, {3})}, [&](auto&, auto& v) { return replace_rows(v[0], v[1], holes); }) < 1e-6);
  }

  TEST_CASE("window attention matches finite differences, with and without groups") {
    Rng rng(5);
    const auto q = rnd(rng, {8, 4}), k = rnd(rng, {8, 4}), v = rnd(rng, {8, 4});
    CHECK(gradient_error({q, k, v}, [](auto&, auto& x) { return window_attention(x[0], x[1], x[2], 4, 2); }) < 1e-6);
    auto groups = std::make_shared<const std::vector<int>>(std::vector<int>{0, 0, 1, 1, 2, 3, 3, 2});
    CHECK(gradient_error({q, k, v}, [&](auto&, auto& x) { return window_attention(x[0], x[1], x[2], 4, 1, groups); }) <
          1e-6);
  }

  TEST_CASE("two-token attention by hand") {
    Tape<double> tape;
    const auto q = tape.constant(T({2, 1}, (Vec<double>(2) << 1.0, 0.0).finished()));
    const auto k = tape.constant(T({2, 1}, (Vec<double>(2) << 0.0, 2.0).finished()));
    const auto v = tape.constant(T({2, 1}, (Vec<double>(2) << 10.0, 20.0).finished()));
    const auto out = window_attention(q, k, v, 2, 1);
    // Row 0 scores (0, 2): weights (1, e^2) / (1 + e^2).
    const double e2 = std::exp(2.0);
    CHECK(out.value().data[0] == doctest::Approx((10.0 + 20.0 * e2) / (1.0 + e2)).epsilon(1e-12));
    // Row 1 scores are both zero: plain average.
    CHECK(out.value().data[1] == doctest::Approx(15.0).epsilon(1e-12));
  }

  TEST_CASE("selective scan matches finite differences") {
    Rng rng(6);
    const std::int64_t L = 5, Di = 3, N = 2;
    auto dt = rnd(rng, {L, Di});
    dt.data = dt.data.abs() * 0.5 + 0.05;
    auto A = rnd(rng, {Di, N});
    A.data = -(A.data.abs() + 0.2);
    A.data[0] = -1e-6;  // exercises the small-argument branch
    CHECK(gradient_error({rnd(rng, {L, Di}), dt, A, rnd(rng, {L, N}), rnd(rng, {L, N}), rnd(rng, {Di})},
                         [](auto&, auto& v) { return selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]); }) < 1e-6);
  }

  TEST_CASE("selective scan agrees with the per-step recurrence") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
      const std::int64_t L = 1 + std::int64_t(uniform_index(rng, 9)), Di = 1 + std::int64_t(uniform_index(rng, 4)),
                         N = 1 + std::int64_t(uniform_index(rng, 4));
      auto u = rnd(rng, {L, Di}), dt = rnd(rng, {L, Di}), A = rnd(rng, {Di, N});
      dt.data = dt.data.abs() + 0.01;
      A.data = -(A.data.abs() + 0.05);
      const auto B = rnd(rng, {L, N}), C = rnd(rng, {L, N}), D = rnd(rng, {Di});
      Tape<double> tape;
      const auto y = selective_scan(tape.constant(u), tape.constant(dt), tape.constant(A), tape.constant(B),
                                    tape.constant(C), tape.constant(D));
      const Eigen::MatrixXd ref = oracle::scan_reference(u.matrix(), dt.matrix(), A.matrix(), B.matrix(), C.matrix(),
                                                         D.data.matrix());
      CHECK((y.value().matrix() - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  TEST_CASE("selective scan limiting cases") {
    const std::int64_t L = 6;
    Eigen::ArrayXd u(L);
    u << 1, 2, -1, 0.5, 3, -2;
    auto run = [&](double a, double step) {
      Tape<double> tape;
      return selective_scan(tape.constant(T({L, 1}, u)), tape.constant(T::constant({L, 1}, step)),
                            tape.constant(T::constant({1, 1}, a)), tape.constant(T::constant({L, 1}, 1.0)),
                            tape.constant(T::constant({L, 1}, 1.0)), tape.constant(T::constant({1}, 0.0)))
          .value()
          .data;
    };
    // A -> 0 with dt = 1: decay 1 and input factor dt, so the scan is a running sum.
    const auto cumsum = run(0.0, 1.0);
    double acc = 0;
    for (Eigen::Index t = 0; t < L; ++t) CHECK(cumsum[t] == doctest::Approx(acc += u[t]).epsilon(1e-12));
    // Fast decay: h_t = (1 - e^-50) u_t, no memory.
    const auto memoryless = run(-1.0, 50.0);
    for (Eigen::Index t = 0; t < L; ++t) CHECK(memoryless[t] == doctest::Approx(u[t]).epsilon(1e-12));
  }

  TEST_CASE("bce with logits matches finite differences and closed form") {
    Rng rng(8);
    Vec<double> targets(6);
    targets << 1, 0, 0, 1, 1, 0;
    CHECK(gradient_error({rnd(rng, {6}, 3.0)}, [&](auto&, auto& v) { return bce_with_logits(v[0], targets); }) < 1e-6);
    Tape<double> tape;
    const auto z = tape.constant(T({2}, (Vec<double>(2) << 0.0, 100.0).finished()));
    Vec<double> y(2);
    y << 1, 1;
    CHECK(bce_with_logits(z, y).value().item() == doctest::Approx(std::log(2.0) / 2).epsilon(1e-12));
  }

  TEST_CASE("basic identities") {
    Tape<double> tape;
    const auto x = tape.input(T({2}, (Vec<double>(2) << 1.0, 2.0).finished()));
    tape.backward(sum_sq(x));
    CHECK(tape.grad_of(x).data[0] == 2.0);
    CHECK(tape.grad_of(x).data[1] == 4.0);

    Rng rng(9);
    const auto s = softmax(tape.constant(rnd(rng, {5, 7}, 4.0)));
    CHECK((s.value().array2d().rowwise().sum() - 1.0).abs().maxCoeff() < 1e-12);

    try {
      tape.backward(mul(x, x));
      FAIL("expected validation error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Validation);
    }
    CHECK_THROWS_AS(add(x, tape.constant(T({3}))), Error);
    CHECK_THROWS_AS(matmul(tape.constant(T({2, 3})), tape.constant(T({2, 3}))), Error);
  }

  TEST_CASE("AdamW first step and decoupled decay") {
    ParameterStore<double> store;
    auto& p = store.add("w", T({3}, (Vec<double>(3) << 1.0, -2.0, 0.5).finished()));
    p.grad << 0.3, -4.0, 0.0;
    AdamWConfig cfg{.lr = 0.01, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0};
    AdamW<double> opt(store, cfg);
    opt.step();
    // Bias correction makes the first update -lr * g / (|g| + eps).
    CHECK(p.value.data[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
    CHECK(p.value.data[1] == doctest::Approx(-2.0 + 0.01 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
    CHECK(p.value.data[2] == 0.5);

    ParameterStore<double> store2;
    auto& q = store2.add("w", T({2}, (Vec<double>(2) << 3.0, -1.0).finished()));
    q.zero_grad();
    AdamW<double> decay(store2, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.5});
    decay.step();
    CHECK(q.value.data[0] == doctest::Approx(3.0 * (1 - 0.05)).epsilon(1e-12));
    CHECK(q.value.data[1] == doctest::Approx(-1.0 * (1 - 0.05)).epsilon(1e-12));

    q.grad << std::nan(""), 0.0;
    try {
      decay.step();
      FAIL("expected training error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Training);
    }
  }

  TEST_CASE("gradient clipping rescales to the bound") {
    ParameterStore<double> store;
    auto& p = store.add("a", T({2}));
    auto& r = store.add("b", T({1}));
    p.grad << 3.0, 0.0;
    r.grad << 4.0;
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
    CHECK(grad_norm(store) == doctest::Approx(1.0));
    CHECK(p.grad[0] == doctest::Approx(0.6));
  }

  TEST_CASE("checkpoint round trip and hash guard") {
    testing::TempDir dir;
    Rng rng(10);
    ParameterStore<double> store;
    store.add("enc.w", rnd(rng, {3, 4}));
    store.add("dec.b", rnd(rng, {5}));
    save_checkpoint(store, {"abc123", "{}"}, dir / "ck");

    ParameterStore<double> other;
    other.add("enc.w", T({3, 4}));
    other.add("dec.b", T({5}));
    const auto info = load_checkpoint(other, dir / "ck", "abc123");
    CHECK(info.config_hash == "abc123");
    for (std::size_t i = 0; i < 2; ++i) {
      // Stored as float32.
      CHECK((other[i].value.data - store[i].value.data).abs().maxCoeff() < 1e-6);
    }
    try {
      load_checkpoint(other, dir / "ck", "different");
      FAIL("expected load error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Load);
    }

    ParameterStore<double> wrong_shape;
    wrong_shape.add("enc.w", T({4, 3}));
    wrong_shape.add("dec.b", T({5}));
    CHECK_THROWS_AS(load_checkpoint(wrong_shape, dir / "ck", ""), Error);

    ParameterStore<double> extra;
    extra.add("enc.w", T({3, 4}));
    extra.add("dec.b", T({5}));
    extra.add("head.w", T::constant({2}, 7.0));
    CHECK_THROWS_AS(load_checkpoint(extra, dir / "ck", ""), Error);
    load_checkpoint(extra, dir / "ck", "", {.allow_missing = true, .prefix = "enc."});
    CHECK((extra[1].value.data == 0.0).all());
    CHECK((extra[2].value.data == 7.0).all());
    CHECK((extra[0].value.data - store[0].value.data).abs().maxCoeff() < 1e-6);
  }

  TEST_CASE("fnv1a reference vectors") {
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
  }
}
