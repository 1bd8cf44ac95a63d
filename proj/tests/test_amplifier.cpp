#include <catch2/catch_amalgamated.hpp>

#include "changekit/amplifier.hpp"
#include "changekit/gradcheck.hpp"

using namespace changekit;

namespace {

Tensor uniform01(Rng& rng, std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("spatial_gradient of a constant is the stabilizer floor") {
  Tape t;
  Value x = t.leaf(Tensor::full({1, 4, 4}, 0.7f));
  for (float v : t.val(ops::spatial_gradient(t, x)).data)
    CHECK(v == Catch::Approx(std::sqrt(1e-8)).margin(1e-7));
}

TEST_CASE("spatial_gradient of a unit ramp is 1 in the interior") {
  const int H = 5, W = 7;
  Tensor f = Tensor::zeros({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) f.at3(0, y, x) = static_cast<float>(x);
  Tape t;
  const Tensor& g = t.val(ops::spatial_gradient(t, t.leaf(f)));
  for (int y = 1; y < H - 1; ++y)
    for (int x = 1; x < W - 1; ++x) CHECK(g.at3(0, y, x) == Catch::Approx(1.0).margin(1e-4));
}

TEST_CASE("spatial_gradient across a step edge peaks at h/2 next to the edge") {
  const int H = 4, W = 8;
  const float h = 2.0f;
  Tensor f = Tensor::zeros({1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 4; x < W; ++x) f.at3(0, y, x) = h;  // step between x=3 and x=4
  Tape t;
  const Tensor& g = t.val(ops::spatial_gradient(t, t.leaf(f)));
  for (int y = 1; y < H - 1; ++y) {
    CHECK(g.at3(0, y, 3) == Catch::Approx(h / 2).margin(1e-4));
    CHECK(g.at3(0, y, 4) == Catch::Approx(h / 2).margin(1e-4));
    CHECK(g.at3(0, y, 2) == Catch::Approx(0.0).margin(1e-3));
  }
}

TEST_CASE("dssim of a tensor with itself is exactly zero") {
  Rng rng(1);
  Tensor x = uniform01(rng, {3, 9, 9});
  Tape t;
  Value d = amplifier::dssim(t, t.leaf(x), t.leaf(x));
  for (float v : t.val(d).data) CHECK(v == 0.0f);
}

TEST_CASE("dssim is bitwise symmetric and stays within [0,1]") {
  for (uint64_t s = 0; s < 100; ++s) {
    Rng rng(s, 5);
    Tensor a = uniform01(rng, {2, 8, 8});
    Tensor b = uniform01(rng, {2, 8, 8});
    Tape t;
    const Tensor& ab = t.val(amplifier::dssim(t, t.leaf(a), t.leaf(b)));
    const Tensor& ba = t.val(amplifier::dssim(t, t.leaf(b), t.leaf(a)));
    CHECK(ab.data == ba.data);
    for (float v : ab.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("dssim of two constant patches matches the closed form") {
  const float a = 0.8f, b = 0.3f;
  const float c1 = amplifier::kDssimC1;
  // variance terms cancel to c2/c2 = 1 on constants
  double want = (1.0 - (2.0 * a * b + c1) / (a * a + b * b + c1)) / 2.0;
  Tape t;
  Value d = amplifier::dssim(t, t.leaf(Tensor::full({1, 9, 9}, a)),
                             t.leaf(Tensor::full({1, 9, 9}, b)));
  // margin reflects float32 cancellation in the variance terms against the
  // small c2 stabilizer, not disagreement with the closed form
  for (float v : t.val(d).data) CHECK(v == Catch::Approx(want).margin(1e-3));
}

TEST_CASE("build_cues: identical inputs give zero diff and dssim blocks") {
  Rng rng(2);
  const int C = 3, H = 8, W = 8;
  Tensor f = uniform01(rng, {C, H, W});
  Tape t;
  const Tensor& cues = t.val(amplifier::build_cues(t, t.leaf(f), t.leaf(f)));
  REQUIRE(cues.shape == std::vector<int>{3 * C + 1, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        CHECK(cues.at3(c, y, x) == 0.0f);                               // |diff|
        CHECK(cues.at3(C + c, y, x) == cues.at3(2 * C + c, y, x));      // same gradients
      }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) CHECK(cues.at3(3 * C, y, x) == 0.0f);  // dssim
}

TEST_CASE("build_cues shape arithmetic and hand-checked diff block") {
  Tape t;
  Value a = t.leaf(Tensor::zeros({4, 16, 16}));
  CHECK(t.val(amplifier::build_cues(t, a, a)).shape == std::vector<int>{13, 16, 16});

  Value f1 = t.leaf(Tensor({1, 2, 2}, {0, 1, 0, 1}));
  Value f2 = t.leaf(Tensor({1, 2, 2}, {0, 0, 0, 0}));
  const Tensor& cues = t.val(amplifier::build_cues(t, f1, f2));
  CHECK(cues.at3(0, 0, 0) == 0.0f);
  CHECK(cues.at3(0, 0, 1) == 1.0f);
  CHECK(cues.at3(0, 1, 0) == 0.0f);
  CHECK(cues.at3(0, 1, 1) == 1.0f);
}

TEST_CASE("spatial_gate: zero net gives 0.5, output always in (0,1), bias monotone") {
  Rng rng(3);
  const int C = 2;
  amplifier::Params p = amplifier::init_params(C, 2, 0.0f, rng);
  Tensor cues = uniform01(rng, {3 * C + 1, 6, 6});

  amplifier::Params zero = p;
  for (auto& [name, tp] : amplifier::param_refs(zero, ""))
    for (float& v : tp->data) v = 0.0f;
  {
    Tape t;
    for (float v : t.val(amplifier::spatial_gate(t, t.leaf(cues), amplifier::stage(t, zero))).data)
      CHECK(v == 0.5f);
  }
  Tensor m0, m1;
  {
    Tape t;
    m0 = t.val(amplifier::spatial_gate(t, t.leaf(cues), amplifier::stage(t, p)));
  }
  p.gate2_b.data[0] += 1.0f;
  {
    Tape t;
    m1 = t.val(amplifier::spatial_gate(t, t.leaf(cues), amplifier::stage(t, p)));
  }
  for (size_t i = 0; i < m0.numel(); ++i) {
    CHECK(m0.data[i] > 0.0f);
    CHECK(m0.data[i] < 1.0f);
    CHECK(m1.data[i] > m0.data[i]);  // sigmoid is strictly increasing in the bias
  }
}

TEST_CASE("spatial_gate rejects a cue stack with the wrong channel count") {
  Rng rng(4);
  amplifier::Params p = amplifier::init_params(4, 2, 0.0f, rng);
  Tape t;
  CHECK_THROWS_AS(
      amplifier::spatial_gate(t, t.leaf(Tensor::zeros({5, 6, 6})), amplifier::stage(t, p)),
      std::invalid_argument);
}

TEST_CASE("channel_weights: zero parameters give 0.5; scalar case gives sigmoid(1)") {
  Rng rng(5);
  amplifier::Params p = amplifier::init_params(4, 4, 0.0f, rng);
  for (auto& [name, tp] : amplifier::param_refs(p, ""))
    for (float& v : tp->data) v = 0.0f;
  {
    Tape t;
    Value f = t.leaf(uniform01(rng, {4, 5, 5}));
    for (float v : t.val(amplifier::channel_weights(t, f, amplifier::stage(t, p))).data)
      CHECK(v == 0.5f);
  }
  // C=1, r=1: W1 = W2 = [1], biases 0, constant feature 1 -> sigmoid(relu(1))
  amplifier::Params q = amplifier::init_params(1, 1, 0.0f, rng);
  q.mlp_w1 = Tensor({1, 1}, {1.0f});
  q.mlp_b1 = Tensor::zeros({1});
  q.mlp_w2 = Tensor({1, 1}, {1.0f});
  q.mlp_b2 = Tensor::zeros({1});
  Tape t;
  Value f = t.leaf(Tensor::full({1, 3, 3}, 1.0f));
  CHECK(t.val(amplifier::channel_weights(t, f, amplifier::stage(t, q))).item() ==
        Catch::Approx(0.7310586).margin(1e-5));
}

TEST_CASE("amplify: alpha 0 is bitwise identity; full gate doubles; hand case") {
  Rng rng(6);
  Tensor f = random_tensor(rng, {3, 4, 4});
  Tensor m = uniform01(rng, {1, 4, 4});
  Tensor s = uniform01(rng, {3});
  {
    Tape t;
    Value out = amplifier::amplify(t, t.leaf(f), t.leaf(m), t.leaf(s),
                                   t.leaf(Tensor::scalar(0.0f)));
    CHECK(t.val(out).data == f.data);
  }
  {
    Tape t;
    Value out = amplifier::amplify(t, t.leaf(f), t.leaf(Tensor::full({1, 4, 4}, 1.0f)),
                                   t.leaf(Tensor::full({3}, 1.0f)),
                                   t.leaf(Tensor::scalar(1.0f)));
    for (size_t i = 0; i < f.numel(); ++i)
      CHECK(t.val(out).data[i] == Catch::Approx(2.0f * f.data[i]));
  }
  {
    Tape t;
    Value out = amplifier::amplify(
        t, t.leaf(Tensor({1, 2, 2}, {1, 2, 3, 4})), t.leaf(Tensor({1, 2, 2}, {1, 0, 0, 1})),
        t.leaf(Tensor({1}, {0.5f})), t.leaf(Tensor::scalar(2.0f)));
    CHECK(t.val(out).data == std::vector<float>{2, 2, 3, 8});
  }
}

TEST_CASE("gate_sparsity_loss is the mean of the gate map") {
  Tape t;
  CHECK(t.val(amplifier::gate_sparsity_loss(t, t.leaf(Tensor::zeros({1, 2, 2})))).item() == 0.0f);
  CHECK(t.val(amplifier::gate_sparsity_loss(t, t.leaf(Tensor::full({1, 2, 2}, 1.0f)))).item() ==
        1.0f);
  CHECK(t.val(amplifier::gate_sparsity_loss(t, t.leaf(Tensor({1, 2, 2}, {1, 0, 0, 0})))).item() ==
        0.25f);
}

TEST_CASE("amplifier forward: no-op at init, algebraic identity, sign preservation") {
  for (uint64_t s = 0; s < 100; ++s) {
    Rng rng(s, 9);
    const int C = 4, H = 6, W = 6;
    amplifier::Params p = amplifier::init_params(C, 4, 0.0f, rng);
    Tensor f1 = uniform01(rng, {C, H, W});
    Tensor f2 = uniform01(rng, {C, H, W});
    Tensor fused = random_tensor(rng, {C, H, W});

    // alpha = 0 (as initialized): exact no-op
    {
      Tape t;
      amplifier::State st = amplifier::forward(t, t.leaf(f1), t.leaf(f2), t.leaf(fused),
                                               amplifier::stage(t, p));
      CHECK(t.val(st.amplified).data == fused.data);
    }
    // random alpha: F' - F == alpha * M * s * F elementwise
    p.alpha.data[0] = static_cast<float>(rng.uniform(-1.0, 1.0));
    Tape t;
    amplifier::State st = amplifier::forward(t, t.leaf(f1), t.leaf(f2), t.leaf(fused),
                                             amplifier::stage(t, p));
    const Tensor& out = t.val(st.amplified);
    const Tensor& m = t.val(st.gate_map);
    const Tensor& cw = t.val(st.channel_w);
    float alpha = p.alpha.data[0];
    bool factor_positive = true;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double factor = 1.0 + alpha * m.at3(0, y, x) * cw.data[c];
          double want = fused.at3(c, y, x) * factor;
          double got = out.at3(c, y, x);
          CHECK(std::fabs(got - want) <= 1e-6 * std::max(1.0, std::fabs(want)));
          if (factor <= 0.0) factor_positive = false;
        }
    if (factor_positive)
      for (size_t i = 0; i < out.numel(); ++i) {
        float a = out.data[i], b = fused.data[i];
        CHECK(((a >= 0.0f) == (b >= 0.0f) || a == 0.0f || b == 0.0f));
      }
    for (float v : m.data) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
    for (float v : cw.data) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
}

TEST_CASE("gradient check passes through the full amplifier") {
  // fixed non-degenerate points; the wider floor drops elements whose float32
  // finite differences are noise-dominated in this deep composition
  for (uint64_t seed : {3ULL, 5ULL}) {
    Rng rng(seed, 1);
    const int C = 2, H = 7, W = 7;
    amplifier::Params p = amplifier::init_params(C, 2, 0.0f, rng);
    p.alpha.data[0] = 0.4f;
    GradReport r = check_gradients(
        "amplifier.forward",
        {uniform01(rng, {C, H, W}), uniform01(rng, {C, H, W}),
         random_tensor(rng, {C, H, W}), p.gate1_w, p.gate1_b, p.gate2_w, p.gate2_b,
         p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2, p.alpha},
        [](Tape& t, const std::vector<Value>& in) {
          amplifier::ParamValues pv{in[3], in[4], in[5],  in[6], in[7],
                                    in[8], in[9], in[10], in[11]};
          amplifier::State st = amplifier::forward(t, in[0], in[1], in[2], pv);
          return ops::sum_all(t, st.amplified);
        },
        1e-2, 1e-2, 3e-2);
    CHECK(r.passed);
    CHECK(r.checked > 50);
  }
}
