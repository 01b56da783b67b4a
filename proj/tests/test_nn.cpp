#include <cmath>

#include "doctest.h"
#include "hdseg/nn.hpp"
#include "support.hpp"

using namespace hdseg;
using namespace hdseg::nn;

namespace {

Tensor random_input(testing::Rng& rng, int c, Shape3 s) {
  Tensor t(c, s);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : t.values()) v = n(rng);
  return t;
}

void randomize(ParamStore& store, testing::Rng& rng, float scale = 0.3f) {
  std::normal_distribution<float> n(0.0f, scale);
  for (auto& p : store.all()) {
    for (float& v : p.value) v += n(rng);
  }
}

// Projection loss <r, y> in double.
double project(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y.values()[i]) * r.values()[i];
  return s;
}

double fd(const std::function<double()>& f, float& x, float h) {
  const float saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * static_cast<double>(h));
}

// Compares analytic input and parameter gradients of `forward` against
// float central differences.
void check_layer(ParamStore& store, Tensor x, const std::function<Tensor(const Tensor&)>& forward,
                 const std::function<Tensor(const Tensor& x, const Tensor& gy, GradStore& g)>& backward,
                 testing::Rng& rng, float h, double tol) {
  const Tensor y = forward(x);
  const Tensor r = random_input(rng, y.channels(), y.shape());
  GradStore g(store);
  const Tensor gx = backward(x, r, g);
  auto loss = [&] { return project(forward(x), r); };

  std::vector<double> a, n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    a.push_back(gx.values()[i]);
    n.push_back(fd(loss, x.values()[i], h));
  }
  CHECK(testing::vector_rel_err(a, n) <= tol);
  a.clear();
  n.clear();
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    auto& vals = store[static_cast<int>(pi)].value;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      a.push_back(g[static_cast<int>(pi)][i]);
      n.push_back(fd(loss, vals[i], h));
    }
  }
  CHECK(testing::vector_rel_err(a, n) <= tol);
}

}  // namespace

TEST_CASE("param store bookkeeping") {
  ParamStore s;
  const int a = s.add("a", {2, 3}, 1.0f);
  const int b = s.add("b", {4});
  CHECK(s.size() == 2);
  CHECK(s.total_values() == 10);
  CHECK(s.find("b") == b);
  CHECK(s.find("zz") == -1);
  CHECK(s[a].value[5] == 1.0f);
  GradStore g(s);
  g[b][1] = 3.0f;
  CHECK(g.squared_norm() == doctest::Approx(9.0));
  g.scale(2.0f);
  CHECK(g[b][1] == 6.0f);
  g.zero();
  CHECK(g.squared_norm() == 0.0);
}

TEST_CASE("conv3d 3x3x3 gradients") {
  testing::Rng rng(1);
  ParamStore store;
  Conv3d conv(store, "c", 2, 3, 3, 1, 1);
  randomize(store, rng);
  const Tensor x = random_input(rng, 2, {4, 4, 4});
  check_layer(
      store, x, [&](const Tensor& in) { return conv.forward(store, in); },
      [&](const Tensor& in, const Tensor& gy, GradStore& g) { return conv.backward(store, in, gy, g); }, rng, 1e-2f,
      1e-3);
}

TEST_CASE("conv3d strided and pointwise gradients") {
  testing::Rng rng(2);
  for (auto [k, stride, pad] : {std::tuple{2, 2, 0}, std::tuple{1, 1, 0}, std::tuple{3, 2, 1}}) {
    ParamStore store;
    Conv3d conv(store, "c", 2, 2, k, stride, pad);
    randomize(store, rng);
    const Tensor x = random_input(rng, 2, {4, 4, 4});
    CHECK(conv.forward(store, x).shape() == conv.output_shape(x.shape()));
    check_layer(
        store, x, [&](const Tensor& in) { return conv.forward(store, in); },
        [&](const Tensor& in, const Tensor& gy, GradStore& g) { return conv.backward(store, in, gy, g); }, rng, 1e-2f,
        1e-3);
  }
}

TEST_CASE("transposed conv doubles resolution and has correct gradients") {
  testing::Rng rng(3);
  ParamStore store;
  ConvTranspose3d up(store, "u", 3, 2);
  randomize(store, rng);
  const Tensor x = random_input(rng, 3, {2, 2, 2});
  CHECK(up.forward(store, x).shape() == Shape3{4, 4, 4});
  check_layer(
      store, x, [&](const Tensor& in) { return up.forward(store, in); },
      [&](const Tensor& in, const Tensor& gy, GradStore& g) { return up.backward(store, in, gy, g); }, rng, 1e-2f,
      1e-3);
}

TEST_CASE("group norm normalizes per group and has correct gradients") {
  testing::Rng rng(4);
  ParamStore store;
  GroupNorm gn(store, "n", 4, 2);
  Tensor x = random_input(rng, 4, {2, 2, 2});
  for (float& v : x.values()) v = 3.0f * v + 1.0f;
  GroupNorm::Cache cache;
  const Tensor y = gn.forward(store, x, &cache);
  for (int grp = 0; grp < 2; ++grp) {
    double s = 0.0, ss = 0.0;
    for (int c = 2 * grp; c < 2 * grp + 2; ++c) {
      for (std::size_t v = 0; v < 8; ++v) {
        s += y.channel(c)[v];
        ss += y.channel(c)[v] * y.channel(c)[v];
      }
    }
    CHECK(s / 16 == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(ss / 16 == doctest::Approx(1.0).epsilon(1e-3));
  }
  randomize(store, rng);
  check_layer(
      store, x,
      [&](const Tensor& in) { return gn.forward(store, in, nullptr); },
      [&](const Tensor& in, const Tensor& gy, GradStore& g) {
        GroupNorm::Cache c;
        gn.forward(store, in, &c);
        return gn.backward(store, c, gy, g);
      },
      rng, 1e-2f, 5e-3);
}

TEST_CASE("residual block gradients") {
  testing::Rng rng(5);
  ParamStore store;
  ResBlock block(store, "r", 4, 2);
  randomize(store, rng);
  const Tensor x = random_input(rng, 4, {4, 4, 4});
  check_layer(
      store, x, [&](const Tensor& in) { return block.forward(store, in, nullptr); },
      [&](const Tensor& in, const Tensor& gy, GradStore& g) {
        ResBlock::Cache c;
        block.forward(store, in, &c);
        return block.backward(store, c, gy, g);
      },
      rng, 2e-3f, 2e-2);
}

TEST_CASE("he normal init has the expected spread") {
  ParamStore store;
  const int w = store.add("w", {64, 8, 3, 3, 3});
  std::mt19937_64 rng(7);
  he_normal(store[w], 8 * 27, rng);
  double ss = 0.0;
  for (float v : store[w].value) ss += static_cast<double>(v) * v;
  const double var = ss / static_cast<double>(store[w].value.size());
  CHECK(var == doctest::Approx(2.0 / (8 * 27)).epsilon(0.05));
}
