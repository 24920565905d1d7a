#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "satlab/autodiff.hpp"

using namespace satlab;
using ad::Tape;
using ad::Var;
using oracle::finite_difference_check;
using oracle::project;
using oracle::random_tensor;

namespace {

using Vars = std::vector<Var<double>>;

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(Shape{n}, std::move(v));
}

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>(Shape{r, c}, std::move(v));
}

constexpr double kFdTol = 1e-6;

const std::vector<Shape> kShapes = {Shape{5}, Shape{3, 4}, Shape{2, 3, 5}};

}  // namespace

TEST_SUITE("matmul") {
  TEST_CASE("identity and projector") {
    Tape<double> tape;
    auto i2 = tape.constant(mat(2, 2, {1, 0, 0, 1}));
    auto m = tape.constant(mat(2, 2, {1, 2, 3, 4}));
    CHECK(ad::matmul(i2, m).value() == mat(2, 2, {1, 2, 3, 4}));
    auto p = tape.constant(mat(2, 2, {1, 0, 0, 0}));
    auto c = tape.constant(mat(2, 1, {5, 7}));
    CHECK(ad::matmul(p, c).value() == mat(2, 1, {5, 0}));
  }

  TEST_CASE("gradient against finite differences") {
    auto g = [](Vars& v) { return project(ad::matmul(v[0], v[1])); };
    CHECK(finite_difference_check(g, {random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({2, 3, 4}, 3), random_tensor({4, 5}, 4)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({2, 1, 3, 2}, 5), random_tensor({3, 2, 4}, 6)}).max_rel_err <
          kFdTol);
  }

  TEST_CASE("shape mismatch names both shapes") {
    Tape<double> tape;
    auto a = tape.constant(Tensor<double>(Shape{2, 3}));
    auto b = tape.constant(Tensor<double>(Shape{4, 2}));
    try {
      ad::matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[4,2]") != std::string::npos);
    }
  }
}

TEST_SUITE("elementwise") {
  TEST_CASE("unary values") {
    Tape<double> tape;
    CHECK(ad::relu(tape.constant(vec({-1, 0, 2}))).value() == vec({0, 0, 2}));
    CHECK(ad::sigmoid(tape.constant(vec({0}))).value()[0] == doctest::Approx(0.5));
    CHECK(ad::unary(ad::UnaryKind::neg, tape.constant(vec({1.5}))).value()[0] == -1.5);
    CHECK(ad::unary(ad::UnaryKind::identity, tape.constant(vec({1.5}))).value()[0] == 1.5);
  }

  TEST_CASE("gelu uses the tanh approximation") {
    Tape<double> tape;
    const double x = 0.7;
    const double expect = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(ad::gelu(tape.constant(vec({x}))).value()[0] == doctest::Approx(expect).epsilon(1e-15));
  }

  TEST_CASE("relu derivative at zero is zero") {
    Tape<double> tape;
    auto x = tape.leaf(vec({0.0, 1.0, -1.0}));
    tape.backward(ad::sum_all(ad::relu(x)));
    CHECK(tape.grad(x) == vec({0.0, 1.0, 0.0}));
  }

  TEST_CASE("tanh gradient at 0.3") {
    auto g = [](Vars& v) { return ad::sum_all(ad::tanh(v[0])); };
    CHECK(finite_difference_check(g, {vec({0.3})}).max_rel_err < kFdTol);
  }

  TEST_CASE("every unary kind passes finite differences on three shapes") {
    using K = ad::UnaryKind;
    for (K kind : {K::relu, K::sigmoid, K::tanh, K::identity, K::gelu, K::exp, K::log, K::neg}) {
      CAPTURE(static_cast<int>(kind));
      for (std::size_t i = 0; i < kShapes.size(); ++i) {
        const double lo = kind == K::log ? 0.2 : -1.0;
        auto g = [kind](Vars& v) { return project(ad::unary(kind, v[0])); };
        CHECK(finite_difference_check(g, {random_tensor(kShapes[i], 10 + i, lo, 1.5)}).max_rel_err < kFdTol);
      }
    }
  }

  TEST_CASE("log rejects non-positive input") {
    Tape<double> tape;
    CHECK_THROWS_AS(ad::log(tape.constant(vec({1.0, 0.0}))), DomainError);
    CHECK_THROWS_AS(ad::log(tape.constant(vec({-2.0}))), DomainError);
  }

  TEST_CASE("binary values and broadcasting") {
    Tape<double> tape;
    CHECK(ad::add(tape.constant(vec({1, 2})), tape.constant(vec({10, 20}))).value() == vec({11, 22}));
    auto s = tape.leaf(Tensor<double>::scalar(2.0));
    auto x = tape.constant(vec({3, 4}));
    auto y = ad::mul(s, x);
    CHECK(y.value() == vec({6, 8}));
    auto up = tape.constant(vec({0.5, -1.0}));
    tape.backward(ad::sum_all(ad::mul(y, up)));
    CHECK(tape.grad(s).item() == doctest::Approx(0.5 * 3 - 1.0 * 4));
  }

  TEST_CASE("binary gradients on three shape pairs") {
    using K = ad::BinaryKind;
    const std::vector<std::pair<Shape, Shape>> pairs = {
        {Shape{4}, Shape{4}}, {Shape{3, 4}, Shape{1, 4}}, {Shape{2, 3, 1}, Shape{3, 5}}};
    for (K kind : {K::add, K::sub, K::mul, K::div}) {
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        CAPTURE(static_cast<int>(kind));
        CAPTURE(i);
        auto g = [kind](Vars& v) { return project(ad::binary(kind, v[0], v[1])); };
        // divisor bounded away from zero
        auto b = random_tensor(pairs[i].second, 30 + i, 0.5, 2.0);
        CHECK(finite_difference_check(g, {random_tensor(pairs[i].first, 20 + i), b}).max_rel_err < kFdTol);
      }
    }
  }

  TEST_CASE("binary errors") {
    Tape<double> tape;
    CHECK_THROWS_AS(ad::add(tape.constant(Tensor<double>(Shape{2, 3})), tape.constant(Tensor<double>(Shape{4}))),
                    ShapeError);
    CHECK_THROWS_AS(ad::div(tape.constant(vec({1, 2})), tape.constant(vec({1, 0}))), DomainError);
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("uniform and stable") {
    Tape<double> tape;
    auto u = ad::softmax_lastdim(tape.constant(vec({0, 0, 0, 0})));
    for (double v : u.value().values()) CHECK(v == doctest::Approx(0.25));
    auto big = ad::softmax_lastdim(tape.constant(vec({1000, 0})));
    CHECK(big.value()[0] == doctest::Approx(1.0));
    CHECK(big.value()[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(big.value()[1]));
  }

  TEST_CASE("rows sum to one and ignore row shifts") {
    Tape<double> tape;
    auto x = random_tensor({6, 9}, 77, -5, 5);
    auto shifted = x;
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 9; ++c) shifted[r * 9 + c] += 3.0 * static_cast<double>(r) - 7.0;
    auto p = ad::softmax_lastdim(tape.constant(x)).value();
    auto q = ad::softmax_lastdim(tape.constant(shifted)).value();
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) s += p[r * 9 + c];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK(max_abs_diff(p, q) < 1e-6);
  }

  TEST_CASE("gradient") {
    auto g = [](Vars& v) { return project(ad::softmax_lastdim(v[0])); };
    CHECK(finite_difference_check(g, {random_tensor({2, 5}, 5)}).max_rel_err < kFdTol);
    for (std::size_t i = 0; i < kShapes.size(); ++i) {
      CHECK(finite_difference_check(g, {random_tensor(kShapes[i], 40 + i, -2, 2)}).max_rel_err < kFdTol);
    }
  }
}

TEST_SUITE("causal_mask") {
  TEST_CASE("upper triangle gets zero weight after softmax") {
    Tape<double> tape;
    auto p = ad::softmax_lastdim(ad::causal_mask(tape.constant(random_tensor({2, 4, 4}, 8)))).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j) CHECK(p[(b * 4 + i) * 4 + j] == 0.0);
  }

  TEST_CASE("gradient") {
    auto g = [](Vars& v) { return project(ad::softmax_lastdim(ad::causal_mask(v[0]))); };
    CHECK(finite_difference_check(g, {random_tensor({3, 3}, 9)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({2, 4, 4}, 10)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({2, 1, 5, 5}, 11)}).max_rel_err < kFdTol);
  }

  TEST_CASE("needs square trailing axes") {
    Tape<double> tape;
    CHECK_THROWS_AS(ad::causal_mask(tape.constant(Tensor<double>(Shape{2, 3}))), ShapeError);
  }
}

TEST_SUITE("rms_norm") {
  TEST_CASE("constant vector normalizes to unit RMS") {
    Tape<double> tape;
    auto y = ad::rms_norm(tape.constant(Tensor<double>(Shape{8}, -3.0)), tape.constant(Tensor<double>(Shape{8}, 1.0)),
                          1e-12);
    for (double v : y.value().values()) CHECK(v == doctest::Approx(-1.0).epsilon(1e-9));
  }

  TEST_CASE("zero weight gives zero output") {
    Tape<double> tape;
    auto y = ad::rms_norm(tape.constant(random_tensor({3, 8}, 4)), tape.constant(Tensor<double>(Shape{8}, 0.0)), 1e-5);
    for (double v : y.value().values()) CHECK(v == 0.0);
  }

  TEST_CASE("gradient in both operands") {
    auto g = [](Vars& v) { return project(ad::rms_norm(v[0], v[1], 1e-5)); };
    CHECK(finite_difference_check(g, {random_tensor({4, 8}, 12), random_tensor({8}, 13)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({6}, 14), random_tensor({6}, 15)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g, {random_tensor({2, 3, 4}, 16), random_tensor({4}, 17)}).max_rel_err < kFdTol);
  }

  TEST_CASE("weight size must match") {
    Tape<double> tape;
    CHECK_THROWS_AS(ad::rms_norm(tape.constant(Tensor<double>(Shape{2, 4})), tape.constant(Tensor<double>(Shape{3})),
                                 1e-5),
                    ShapeError);
  }
}

TEST_SUITE("embedding") {
  TEST_CASE("row gather") {
    Tape<double> tape;
    auto table = tape.constant(mat(3, 2, {0, 1, 10, 11, 20, 21}));
    auto y = ad::embedding_lookup(table, TokenGrid(1, 2, {2, 0}));
    CHECK(y.shape() == Shape{1, 2, 2});
    CHECK(y.value() == Tensor<double>(Shape{1, 2, 2}, {20, 21, 0, 1}));
  }

  TEST_CASE("duplicate ids accumulate") {
    Tape<double> tape;
    auto table = tape.leaf(Tensor<double>(Shape{3, 2}, 0.0));
    auto y = ad::embedding_lookup(table, TokenGrid(1, 2, {1, 1}));
    auto g = tape.constant(Tensor<double>(Shape{1, 2, 2}, {0.5, -2.0, 0.5, -2.0}));
    tape.backward(ad::sum_all(ad::mul(y, g)));
    CHECK(tape.grad(table) == mat(3, 2, {0, 0, 1.0, -4.0, 0, 0}));
  }

  TEST_CASE("gradient via sum of gathered entries") {
    const TokenGrid ids(2, 3, {0, 3, 3, 1, 2, 0});
    auto g = [&](Vars& v) { return ad::sum_all(ad::embedding_lookup(v[0], ids)); };
    CHECK(finite_difference_check(g, {random_tensor({4, 5}, 18)}).max_rel_err < kFdTol);
    auto gp = [&](Vars& v) { return project(ad::embedding_lookup(v[0], ids)); };
    CHECK(finite_difference_check(gp, {random_tensor({4, 3}, 19)}).max_rel_err < kFdTol);
  }

  TEST_CASE("out-of-range id names position and id") {
    Tape<double> tape;
    auto table = tape.constant(Tensor<double>(Shape{3, 2}));
    try {
      ad::embedding_lookup(table, TokenGrid(2, 2, {0, 1, 2, 7}));
      FAIL("expected DomainError");
    } catch (const DomainError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("7") != std::string::npos);
      CHECK(msg.find("b=1") != std::string::npos);
      CHECK(msg.find("t=1") != std::string::npos);
    }
  }
}

TEST_SUITE("cross_entropy") {
  TEST_CASE("uniform logits give ln V") {
    Tape<double> tape;
    std::vector<std::int32_t> t(6);
    std::iota(t.begin(), t.end(), 40);
    auto loss = ad::cross_entropy_mean(tape.constant(Tensor<double>(Shape{2, 3, 256}, 0.0)), TokenGrid(2, 3, t));
    CHECK(loss.value().rank() == 0);
    CHECK(std::abs(loss.value().item() - std::log(256.0)) < 1e-6);
  }

  TEST_CASE("confident correct logit gives near-zero loss") {
    Tape<double> tape;
    Tensor<double> logits(Shape{1, 1, 4}, 0.0);
    logits[2] = 1e4;
    auto loss = ad::cross_entropy_mean(tape.constant(logits), TokenGrid(1, 1, {2}));
    CHECK(loss.value().item() == doctest::Approx(0.0));
  }

  TEST_CASE("gradient") {
    const TokenGrid targets(2, 3, {0, 6, 3, 3, 1, 5});
    auto g = [&](Vars& v) { return ad::cross_entropy_mean(v[0], targets); };
    CHECK(finite_difference_check(g, {random_tensor({2, 3, 7}, 20, -3, 3)}).max_rel_err < kFdTol);
    const TokenGrid small(1, 2, {1, 0});
    auto g2 = [&](Vars& v) { return ad::cross_entropy_mean(v[0], small); };
    CHECK(finite_difference_check(g2, {random_tensor({1, 2, 3}, 21)}).max_rel_err < kFdTol);
    CHECK(finite_difference_check(g2, {random_tensor({2, 5}, 22)}).max_rel_err < kFdTol);
  }

  TEST_CASE("target out of range") {
    Tape<double> tape;
    CHECK_THROWS_AS(ad::cross_entropy_mean(tape.constant(Tensor<double>(Shape{1, 2, 4})), TokenGrid(1, 2, {0, 4})),
                    DomainError);
  }
}

TEST_SUITE("rope") {
  TEST_CASE("position zero is the identity") {
    Tape<double> tape;
    auto x = random_tensor({2, 1, 3, 8}, 23);
    const std::vector<std::size_t> pos{0};
    CHECK(ad::rope_apply(tape.constant(x), pos, 10000.0).value() == x);
  }

  TEST_CASE("pair norms are preserved") {
    Tape<double> tape;
    auto x = random_tensor({2, 5, 3, 8}, 24);
    const std::vector<std::size_t> pos{0, 1, 2, 7, 100};
    auto y = ad::rope_apply(tape.constant(x), pos, 10000.0).value();
    for (std::size_t i = 0; i < x.size(); i += 2) {
      CHECK(std::abs(std::hypot(x[i], x[i + 1]) - std::hypot(y[i], y[i + 1])) < 1e-6);
    }
  }

  TEST_CASE("rotation angle follows the frequency rule") {
    Tape<double> tape;
    Tensor<double> x(Shape{1, 1, 1, 4}, {1, 0, 1, 0});
    const std::vector<std::size_t> pos{3};
    auto y = ad::rope_apply(tape.constant(x), pos, 100.0).value();
    const double a0 = 3.0;
    const double a1 = 3.0 * std::pow(100.0, -2.0 / 4.0);
    CHECK(y[0] == doctest::Approx(std::cos(a0)));
    CHECK(y[1] == doctest::Approx(std::sin(a0)));
    CHECK(y[2] == doctest::Approx(std::cos(a1)));
    CHECK(y[3] == doctest::Approx(std::sin(a1)));
  }

  TEST_CASE("gradient") {
    for (const Shape& s : {Shape{1, 3, 1, 2}, Shape{2, 4, 2, 6}, Shape{1, 5, 3, 4}}) {
      std::vector<std::size_t> pos(s[1]);
      std::iota(pos.begin(), pos.end(), std::size_t{2});
      auto g = [&](Vars& v) { return project(ad::rope_apply(v[0], pos, 10000.0)); };
      CHECK(finite_difference_check(g, {random_tensor(s, 25 + s[3])}).max_rel_err < kFdTol);
    }
  }

  TEST_CASE("odd head dimension rejected") {
    Tape<double> tape;
    const std::vector<std::size_t> pos{0, 1};
    CHECK_THROWS_AS(ad::rope_apply(tape.constant(Tensor<double>(Shape{1, 2, 1, 3})), pos, 10000.0), ShapeError);
  }
}

TEST_SUITE("structural ops") {
  TEST_CASE("reshape, permute, concat and slice gradients") {
    auto g1 = [](Vars& v) { return project(ad::reshape(v[0], Shape{6, 2})); };
    CHECK(finite_difference_check(g1, {random_tensor({3, 4}, 30)}).max_rel_err < kFdTol);
    auto g2 = [](Vars& v) { return project(ad::permute(v[0], {2, 0, 1})); };
    CHECK(finite_difference_check(g2, {random_tensor({2, 3, 4}, 31)}).max_rel_err < kFdTol);
    auto g3 = [](Vars& v) { return project(ad::concat_lastdim(v[0], v[1])); };
    CHECK(finite_difference_check(g3, {random_tensor({2, 3}, 32), random_tensor({2, 2}, 33)}).max_rel_err < kFdTol);
    auto g4 = [](Vars& v) { return project(ad::slice_lastdim(v[0], 1, 2)); };
    CHECK(finite_difference_check(g4, {random_tensor({3, 5}, 34)}).max_rel_err < kFdTol);
  }

  TEST_CASE("permute moves elements") {
    Tape<double> tape;
    auto x = tape.constant(mat(2, 3, {1, 2, 3, 4, 5, 6}));
    CHECK(ad::permute(x, {1, 0}).value() == mat(3, 2, {1, 4, 2, 5, 3, 6}));
    CHECK_THROWS_AS(ad::permute(x, {0, 0}), ShapeError);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives all-ones gradient") {
    Tape<double> tape;
    auto w = tape.leaf(random_tensor({3, 2}, 40));
    tape.backward(ad::sum_all(w));
    const auto g = tape.grad(w);
    for (double v : g.values()) CHECK(v == 1.0);
  }

  TEST_CASE("sum of squares") {
    Tape<double> tape;
    auto w = tape.leaf(vec({1, 2}));
    tape.backward(ad::sum_all(ad::mul(w, w)));
    CHECK(tape.grad(w) == vec({2, 4}));
  }

  TEST_CASE("repeated backward is rejected") {
    Tape<double> tape;
    auto w = tape.leaf(vec({1, 2}));
    auto loss = ad::sum_all(w);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ad::TapeError);
  }

  TEST_CASE("non-scalar loss and foreign variables are rejected") {
    Tape<double> tape;
    auto w = tape.leaf(vec({1, 2}));
    CHECK_THROWS_AS(tape.backward(w), ad::TapeError);
    Tape<double> other;
    auto u = other.leaf(vec({1}));
    CHECK_THROWS_AS(tape.backward(u), ad::TapeError);
  }

  TEST_CASE("records are visited once, in reverse order") {
    Tape<double> tape;
    std::vector<int> order;
    auto x = tape.leaf(vec({1.0}));
    auto a = tape.record(ad::OpKind::custom, x.value(), {x}, [&](ad::BackwardContext<double>& ctx) {
      order.push_back(1);
      ctx.grad_input(0)[0] += ctx.grad_output()[0];
    });
    auto b = tape.record(ad::OpKind::custom, a.value(), {a}, [&](ad::BackwardContext<double>& ctx) {
      order.push_back(2);
      ctx.grad_input(0)[0] += 2 * ctx.grad_output()[0];
    });
    tape.backward(ad::sum_all(b));
    CHECK(order == std::vector<int>{2, 1});
    CHECK(tape.grad(x)[0] == 2.0);
  }

  TEST_CASE("gradients are bit-identical across runs") {
    auto run = [] {
      Tape<float> tape;
      auto a = tape.leaf(oracle::random_tensor_as<float>({4, 6}, 50));
      auto b = tape.leaf(oracle::random_tensor_as<float>({6, 5}, 51));
      auto h = ad::gelu(ad::matmul(a, b));
      tape.backward(ad::sum_all(ad::softmax_lastdim(ad::mul(h, h))));
      return std::make_pair(tape.grad(a), tape.grad(b));
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
  }

  TEST_CASE("no-grad tape computes values only") {
    Tape<double> tape(false);
    auto w = tape.leaf(vec({1, 2}));
    auto y = ad::mul(w, w);
    CHECK(y.value() == vec({1, 4}));
    CHECK_FALSE(tape.requires_grad(y));
  }

  TEST_CASE("param gradients are matched by identity") {
    Param<double> p("p", vec({1.0, -1.0}), true);
    Param<double> q("q", vec({2.0}), true);
    Tape<double> tape;
    auto vp = tape.param(p);
    auto vq = tape.param(q);
    tape.backward(ad::sum_all(ad::mul(vp, vq)));
    std::vector<Param<double>*> ps{&q, &p};
    tape.accumulate_param_grads(ps);
    CHECK(p.grad == vec({2.0, 2.0}));
    CHECK(q.grad == vec({0.0}));
  }
}
