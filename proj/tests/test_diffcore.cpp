#include "doctest.h"

#include "op_cases.hpp"
#include "kpp/ops.hpp"

#include <cmath>
#include <random>

using namespace kpp;
using kpp::testing::random_tensor;

namespace {

constexpr int kDraws = 50;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("forward values of the trivial examples") {
  Tape tape;
  Var a = tape.constant(Tensor({1, 1}, {2.0}));
  Var b = tape.constant(Tensor({1, 1}, {3.0}));
  CHECK(matmul(a, b).value().item() == 6.0);

  Var zero = tape.constant(Tensor::scalar(0.0));
  CHECK(softplus(zero).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  Var image = tape.constant(Tensor({1, 1, 3, 3}, 1.0));
  Var kernel = tape.constant(Tensor({1, 1, 1, 1}, 2.0));
  Var out = conv2d(image, kernel, Var{}, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 3, 3});
  CHECK((out.value().array() == 2.0).all());
}

TEST_CASE("backward of the trivial examples") {
  {
    Tape tape;
    Var x = tape.parameter(Tensor::scalar(3.0));
    tape.backward(mul(x, x));
    CHECK(x.grad().item() == 6.0);
  }
  {
    Tape tape;
    Var x = tape.parameter(Tensor({1}, {0.0}));
    tape.backward(sum_all(kpp::tanh(x)));
    CHECK(x.grad().item() == 1.0);
  }
}

TEST_CASE("backward contract errors") {
  Tape tape;
  Var x = tape.parameter(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), GraphError);
  Var loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), GraphError);
  tape.zero_grad();
  tape.backward(loss);
  CHECK(x.grad()[1] == 4.0);

  Tape other;
  Var y = other.parameter(Tensor({2}, 1.0));
  CHECK_THROWS_AS(add(x, y), GraphError);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[3, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(conv2d(tape.constant(Tensor({1, 2, 4, 4})), tape.constant(Tensor({1, 3, 3, 3})), Var{}, 1, 1),
                  ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
  CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
}

TEST_CASE("non-finite forward values are a hard error") {
  Tape tape;
  Var big = tape.constant(Tensor({1}, {1000.0}));
  CHECK_THROWS_AS(kpp::exp(big), NonFiniteError);
  CHECK_THROWS_AS(kpp::log(tape.constant(Tensor({1}, {-1.0}))), NonFiniteError);
}

TEST_CASE("reductions, broadcast, concat and slice forward") {
  Tape tape;
  Var x = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(sum(x, {0}).value() == Tensor({3}, {5, 7, 9}));
  CHECK(sum(x, {1}, true).value() == Tensor({2, 1}, {6, 15}));
  CHECK(mean(x, {0, 1}).value().item() == 3.5);
  CHECK(broadcast(tape.constant(Tensor({2}, {1, 2})), 3).value() == Tensor({3, 2}, {1, 2, 1, 2, 1, 2}));
  CHECK(concat({x, x}, 1).value() == Tensor({2, 6}, {1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6}));
  CHECK(slice(x, 1, 1, 3).value() == Tensor({2, 2}, {2, 3, 5, 6}));
  CHECK(clamp(tape.constant(Tensor({3}, {-9, 0.5, 4})), -7, 2).value() == Tensor({3}, {-7, 0.5, 2}));
}

TEST_CASE("every registered op matches central finite differences") {
  for (const auto& op : kpp::testing::op_cases()) {
    const double worst = kpp::testing::op_worst_error(op, kDraws);
    INFO(op.name << " worst relative error " << worst);
    CHECK(worst <= kTol);
  }
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(5);
  Tensor x0 = random_tensor(rng, {4, 3});
  auto loss_a = [](Var x) { return sum_all(kpp::tanh(x)); };
  auto loss_b = [](Var x) { return sum_all(mul(softplus(x), x)); };

  auto grad_of = [&](auto build) {
    Tape tape;
    Var x = tape.parameter(x0);
    tape.backward(build(x));
    return x.grad();
  };
  Tensor ga = grad_of(loss_a);
  Tensor gb = grad_of(loss_b);
  Tensor gsum = grad_of([&](Var x) { return add(loss_a(x), loss_b(x)); });
  CHECK(((ga.array() + gb.array()) - gsum.array()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("forward is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(11);
    Tape tape;
    Var x = tape.constant(random_tensor(rng, {2, 3, 8, 8}));
    Var w = tape.constant(random_tensor(rng, {4, 3, 3, 3}));
    Var b = tape.constant(random_tensor(rng, {4}));
    return softplus(conv2d(x, w, b, 2, 1)).value();
  };
  CHECK(run() == run());
}
