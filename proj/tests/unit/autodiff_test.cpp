#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "knnmem/adam.hpp"
#include "knnmem/autodiff.hpp"
#include "knnmem/error.hpp"
#include "knnmem/grad_check.hpp"
#include "knnmem/rng.hpp"

namespace knnmem {
namespace {

Tensor random_tensor(Rng& rng, Shape shape, Real lo = -1.0, Real hi = 1.0) {
  Tensor t(std::move(shape));
  for (Real& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Reduces any output to a scalar with fixed random coefficients, so every
/// output element contributes to the checked gradient.
Var probe(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor coeff(Shape{out.size()});
  for (Real& v : coeff.data()) v = rng.uniform(-1.0, 1.0);
  const Var flat = reshape(out, Shape{1, out.size()});
  return sum(matmul(flat, tape.constant(std::move(coeff))));
}

void expect_primitive_gradients(ParameterSet& params, const LossBuilder& build) {
  GradCheckOptions opts;
  opts.tolerance = 1e-6;
  const GradCheckReport report = grad_check(build, params, opts);
  for (const auto& e : report.entries) {
    EXPECT_TRUE(e.passed) << e.name << " rel " << e.max_rel_error << " abs " << e.max_abs_error;
    EXPECT_GT(e.checked, 0u);
  }
}

TEST(Tensor, ShapeAndAccess) {
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 2), 6.0);
  EXPECT_EQ(to_string(m.shape()), "[2, 3]");
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<Real>{1, 2, 3}), ShapeError);
  m.at(0, 0) = std::nan("");
  EXPECT_FALSE(m.all_finite());
}

TEST(Rng, SameSeedSameDraws) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform_index(17), b.uniform_index(17));
  Rng c = Rng::derive(7, "x"), d = Rng::derive(7, "x"), e = Rng::derive(7, "y");
  EXPECT_EQ(c.next(), d.next());
  EXPECT_NE(Rng::derive(7, "x").next(), e.next());
}

TEST(Rng, UniformStaysInRange) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform(-0.08, 0.08);
    EXPECT_GE(u, -0.08);
    EXPECT_LT(u, 0.08);
    EXPECT_LT(rng.uniform_index(5), 5u);
  }
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng rng(9);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Autodiff, CosineOfVectorWithItselfIsOne) {
  Tape tape;
  Rng rng(1);
  const Var v = tape.constant(random_tensor(rng, Shape{7}));
  EXPECT_NEAR(cosine_rows(v, v).value()[0], 1.0, 1e-15);
}

TEST(Autodiff, CosineOfOrthogonalVectorsIsZero) {
  Tape tape;
  const Var a = tape.constant(Tensor::vector({1, 0, 2}));
  const Var b = tape.constant(Tensor::vector({0, 3, 0}));
  EXPECT_EQ(cosine_rows(a, b).value()[0], 0.0);
}

TEST(Autodiff, CosineOfZeroVectorIsZeroWithZeroGradient) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0, 0, 0}));
  const ParamId q = params.add("q", Tensor::vector({1, 2, 3}));
  Tape tape(&params);
  const Var c = cosine_rows(tape.parameter(p), tape.parameter(q));
  EXPECT_EQ(c.value()[0], 0.0);
  Gradients g(params);
  tape.backward(sum(c), g);
  for (Real v : g.at(p).data()) EXPECT_EQ(v, 0.0);
  for (Real v : g.at(q).data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, CosineStaysInUnitInterval) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    Tape tape;
    const Var a = tape.constant(random_tensor(rng, Shape{3, 4}, -1e3, 1e3));
    const Tensor& base = a.value();
    Tensor scaled = base;
    for (Real& v : scaled.data()) v *= 1.0 + 1e-15;
    const Var c = cosine_rows(a, tape.constant(scaled));
    for (Real v : c.value().data()) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
  }
}

TEST(Autodiff, SoftmaxCrossEntropyOfUniformLogitsIsLogC) {
  for (std::size_t c : {2u, 4u, 14u}) {
    for (std::size_t target = 0; target < c; target += 3) {
      Tape tape;
      const Var loss = softmax_cross_entropy(tape.constant(Tensor(Shape{c}, 0.7)), target);
      EXPECT_NEAR(loss.value()[0], std::log(static_cast<double>(c)), 1e-14);
    }
  }
}

TEST(Autodiff, SoftmaxCrossEntropyIsStableForLargeLogits) {
  Tape tape;
  const Var loss = softmax_cross_entropy(tape.constant(Tensor::vector({1000.0, 0.0, -1000.0})), 0);
  EXPECT_NEAR(loss.value()[0], 0.0, 1e-12);
}

TEST(Autodiff, SumGradientIsAllOnes) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::matrix(2, 3, {1, -2, 3, 4, 5, -6}));
  Tape tape(&params);
  Gradients g(params);
  tape.backward(sum(reshape(tape.parameter(p), Shape{6})), g);
  for (Real v : g.at(p).data()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, CosineGradientVanishesAtIdenticalInputs) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0.3, -1.2, 2.0, 0.5}));
  const ParamId q = params.add("q", Tensor::vector({0.3, -1.2, 2.0, 0.5}));
  Tape tape(&params);
  Gradients g(params);
  tape.backward(cosine_rows(tape.parameter(p), tape.parameter(q)), g);
  for (Real v : g.at(p).data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Autodiff, UnusedParameterGetsZeroGradient) {
  ParameterSet params;
  const ParamId used = params.add("used", Tensor::vector({1, 2}));
  const ParamId unused = params.add("unused", Tensor::vector({3, 4, 5}));
  Tape tape(&params);
  Gradients g(params);
  tape.backward(sum(tape.parameter(used)), g);
  ASSERT_EQ(g.at(unused).shape(), (Shape{3}));
  for (Real v : g.at(unused).data()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, NonScalarLossIsRejected) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({1, 2}));
  Tape tape(&params);
  Gradients g(params);
  EXPECT_THROW(tape.backward(tape.parameter(p), g), ShapeError);
}

TEST(Autodiff, ShapeMismatchNamesThePrimitive) {
  Tape tape;
  const Var a = tape.constant(Tensor(Shape{2, 3}));
  const Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
  }
  EXPECT_THROW(add(a, tape.constant(Tensor(Shape{3}))), ShapeError);
}

TEST(Autodiff, NonFiniteForwardValueIsAnError) {
  Tape tape;
  const Var big = tape.constant(Tensor::vector({1e300}));
  EXPECT_THROW(scalar_mul(big, 1e300), NumericError);
}

TEST(Autodiff, DetachStopsGradient) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({1, 2}));
  Tape tape(&params);
  Gradients g(params);
  const Var x = tape.parameter(p);
  tape.backward(sum(add(x, detach(scalar_mul(x, 3.0)))), g);
  for (Real v : g.at(p).data()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, FrozenRowsDoNotRequireGradient) {
  ParameterSet params;
  const ParamId p = params.add("table", Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}), false, {true, false, false});
  Tape tape(&params);
  Gradients g(params);
  const Var rows[] = {tape.parameter_row(p, 0), tape.parameter_row(p, 1)};
  tape.backward(sum(concat(rows)), g);
  EXPECT_EQ(g.at(p).at(0, 0), 0.0);
  EXPECT_EQ(g.at(p).at(1, 0), 1.0);
  EXPECT_EQ(g.at(p).at(2, 0), 0.0);
}

// Every primitive against central differences at 1e-6.

TEST(AutodiffGradients, Matmul) {
  Rng rng(11);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{3, 4}));
  const ParamId b = params.add("b", random_tensor(rng, Shape{4, 2}));
  const ParamId v = params.add("v", random_tensor(rng, Shape{4}));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var parts[] = {reshape(matmul(t.parameter(a), t.parameter(b)), Shape{6}), matmul(t.parameter(a), t.parameter(v))};
    return probe(t, concat(parts), 1);
  });
}

TEST(AutodiffGradients, AddAndElementwiseMul) {
  Rng rng(12);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{3, 4}));
  const ParamId b = params.add("b", random_tensor(rng, Shape{3, 4}));
  const ParamId row = params.add("row", random_tensor(rng, Shape{4}));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var x = add(t.parameter(a), elementwise_mul(t.parameter(a), t.parameter(b)));
    return probe(t, elementwise_mul(x, t.parameter(row)), 2);
  });
}

TEST(AutodiffGradients, ConcatSliceReshapeTranspose) {
  Rng rng(13);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{2, 3}));
  const ParamId b = params.add("b", random_tensor(rng, Shape{1, 3}));
  const ParamId v = params.add("v", random_tensor(rng, Shape{5}));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var rows[] = {t.parameter(a), t.parameter(b)};
    const Var stacked = transpose(concat(rows, 0));
    const Var parts[] = {reshape(stacked, Shape{9}), slice(t.parameter(v), 1, 3)};
    return probe(t, concat(parts), 3);
  });
}

TEST(AutodiffGradients, TanhSigmoid) {
  Rng rng(14);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{6}, -3, 3));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var parts[] = {tanh(t.parameter(a)), sigmoid(t.parameter(a))};
    return probe(t, concat(parts), 4);
  });
}

TEST(AutodiffGradients, SumAxesAndScalarMul) {
  Rng rng(15);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{3, 4}));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var parts[] = {sum(t.parameter(a), 0), sum(t.parameter(a), 1), scalar_mul(sum(t.parameter(a)), -2.5)};
    return probe(t, concat(parts), 5);
  });
}

TEST(AutodiffGradients, NormAndCosine) {
  Rng rng(16);
  ParameterSet params;
  const ParamId a = params.add("a", random_tensor(rng, Shape{3, 5}));
  const ParamId b = params.add("b", random_tensor(rng, Shape{3, 5}));
  const ParamId h = params.add("h", random_tensor(rng, Shape{5}));
  const ParamId k = params.add("k", random_tensor(rng, Shape{5}));
  expect_primitive_gradients(params, [&](Tape& t) {
    const Var parts[] = {l2_norm_rows(t.parameter(a)), cosine_rows(t.parameter(a), t.parameter(b)),
                         cosine_rows(t.parameter(h), t.parameter(k))};
    return probe(t, concat(parts), 6);
  });
}

TEST(AutodiffGradients, SoftmaxCrossEntropy) {
  Rng rng(17);
  ParameterSet params;
  const ParamId z = params.add("z", random_tensor(rng, Shape{5}, -2, 2));
  expect_primitive_gradients(params, [&](Tape& t) { return softmax_cross_entropy(t.parameter(z), 3); });
}

TEST(AutodiffGradients, LstmSequence) {
  Rng rng(19);
  ParameterSet params;
  const ParamId w = params.add("w", random_tensor(rng, Shape{12, 5}, -0.5, 0.5));
  const ParamId b = params.add("b", random_tensor(rng, Shape{12}, -0.5, 0.5));
  const ParamId x = params.add("x", random_tensor(rng, Shape{4, 2}));
  const ParamId y = params.add("y", random_tensor(rng, Shape{2}));
  expect_primitive_gradients(params, [&](Tape& t) {
    // The repeated input checks that gradients from several steps add up.
    const Var xs[] = {t.parameter_row(x, 0), t.parameter(y), t.parameter_row(x, 2), t.parameter(y),
                      t.parameter_row(x, 3)};
    const Var parts[] = {lstm_sequence(t.parameter(w), t.parameter(b), xs),
                         lstm_sequence(t.parameter(w), t.parameter(b), xs, true)};
    return probe(t, concat(parts), 8);
  });
}

TEST(GradCheck, LinearModelIsExact) {
  Rng rng(18);
  ParameterSet params;
  const ParamId w = params.add("w", random_tensor(rng, Shape{3, 4}));
  const ParamId b = params.add("b", random_tensor(rng, Shape{3}));
  const Tensor x = random_tensor(rng, Shape{4});
  const GradCheckReport report = grad_check(
      [&](Tape& t) { return probe(t, add(matmul(t.parameter(w), t.constant(x)), t.parameter(b)), 7); }, params);
  ASSERT_TRUE(report.all_passed());
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-8) << e.name;
}

TEST(GradCheck, CorruptedBackwardIsReported) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0.5, -0.25, 1.5}));
  auto squared_wrong = [&](Tape& t) {
    const Var x = t.parameter(p);
    Tensor out(Shape{3});
    for (std::size_t i = 0; i < 3; ++i) out[i] = x.value()[i] * x.value()[i];
    const Var in[] = {x};
    // d(x^2)/dx is 2x; this rule claims 3x.
    const Var y = t.record("bad_square", std::move(out), in, [id = x.id()](Tape& tp, const Tensor&, const Tensor& g) {
      Tensor d(Shape{3});
      for (std::size_t i = 0; i < 3; ++i) d[i] = 3.0 * tp.value(id)[i] * g[i];
      tp.accumulate(id, d);
    });
    return sum(y);
  };
  const GradCheckReport report = grad_check(squared_wrong, params);
  EXPECT_FALSE(report.all_passed());
  ASSERT_EQ(report.failures().size(), 1u);
  EXPECT_EQ(report.failures()[0], "p");
}

TEST(GradCheck, RestoresParameterValues) {
  Rng rng(19);
  ParameterSet params;
  const ParamId w = params.add("w", random_tensor(rng, Shape{2, 2}));
  const Tensor before = params[w].value;
  grad_check([&](Tape& t) { return sum(reshape(tanh(t.parameter(w)), Shape{4})); }, params);
  EXPECT_EQ(params[w].value, before);
}

TEST(Gradients, GlobalNormClipping) {
  ParameterSet params;
  const ParamId a = params.add("a", Tensor::vector({0, 0}));
  const ParamId b = params.add("b", Tensor::vector({0}));
  Gradients g(params);
  g.at(a) = Tensor::vector({3, 0});
  g.at(b) = Tensor::vector({4});
  EXPECT_DOUBLE_EQ(g.clip_global_norm(10.0), 5.0);
  EXPECT_EQ(g.get(a)[0], 3.0);
  EXPECT_DOUBLE_EQ(g.clip_global_norm(1.0), 5.0);
  EXPECT_NEAR(g.global_norm(), 1.0, 1e-15);
  EXPECT_NEAR(g.get(b)[0], 0.8, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParametersButCountsTheStep) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({1.0, -2.0}));
  AdamState state(params, AdamConfig{});
  Gradients g(params);
  g.at(p);
  adam_step(params, g, state);
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(params[p].value, Tensor::vector({1.0, -2.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0.0}));
  AdamState state(params, AdamConfig{});
  Gradients g(params);
  g.at(p) = Tensor::vector({1.0});
  adam_step(params, g, state);
  // m_hat = 1, v_hat = 1 -> update lr * 1 / (1 + eps).
  EXPECT_NEAR(params[p].value[0], -1e-4, 1e-11);
}

TEST(Adam, MatchesHandComputedSecondStep) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0.5}));
  const AdamConfig cfg{1e-2, 0.9, 0.999, 1e-8};
  AdamState state(params, cfg);
  Gradients g(params);
  Real x = 0.5, m = 0, v = 0;
  const Real grads[] = {0.3, -1.1, 0.7};
  for (int t = 1; t <= 3; ++t) {
    g.at(p) = Tensor::vector({grads[t - 1]});
    adam_step(params, g, state);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
    const Real mh = m / (1 - std::pow(0.9, t));
    const Real vh = v / (1 - std::pow(0.999, t));
    x -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(params[p].value[0], x, 1e-14);
  }
}

TEST(Adam, FrozenTensorIsBitwiseUnchanged) {
  ParameterSet params;
  const ParamId frozen = params.add("frozen", Tensor::vector({0.1, 0.2}), true);
  const ParamId rows = params.add("rows", Tensor::matrix(2, 1, {0.3, 0.4}), false, {true, false});
  AdamState state(params, AdamConfig{});
  Gradients g(params);
  for (int i = 0; i < 20; ++i) {
    g.at(frozen) = Tensor::vector({1.0, -1.0});
    g.at(rows) = Tensor::matrix(2, 1, {1.0, 1.0});
    adam_step(params, g, state);
  }
  EXPECT_EQ(params[frozen].value, Tensor::vector({0.1, 0.2}));
  EXPECT_EQ(params[rows].value.at(0, 0), 0.3);
  EXPECT_NE(params[rows].value.at(1, 0), 0.4);
}

TEST(Adam, ShapeMismatchIsAnError) {
  ParameterSet params;
  const ParamId p = params.add("p", Tensor::vector({0.0, 0.0}));
  AdamState state(params, AdamConfig{});
  Gradients g(params);
  g.at(p) = Tensor::vector({1.0});
  EXPECT_THROW(adam_step(params, g, state), ShapeError);
}

}  // namespace
}  // namespace knnmem
