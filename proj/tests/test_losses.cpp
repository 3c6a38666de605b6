#include <doctest.h>

#include <cmath>
#include <random>

#include "fieldsynth/error.hpp"
#include "fieldsynth/losses.hpp"

using namespace fieldsynth;
using namespace fieldsynth::train;

namespace {

template <typename T>
std::span<const T> cs(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

}  // namespace

TEST_CASE("mae examples") {
  const std::vector<double> a = {0.3, 0.9, 0.1};
  CHECK(loss_mae(cs(a), cs(a)) == 0.0);
  CHECK(loss_mae(cs(std::vector<double>{0, 1}), cs(std::vector<double>{1, 0})) == 1.0);
  CHECK(loss_mae(cs(std::vector<double>{0.2, 0.5}), cs(std::vector<double>{0.4, 0.1})) == doctest::Approx(0.3));
  const std::vector<double> empty;
  CHECK_THROWS_AS(loss_mae(cs(empty), cs(empty)), ArgumentError);
  CHECK_THROWS_AS(loss_mae(cs(a), cs(std::vector<double>{1.0})), ArgumentError);
}

TEST_CASE("perfect segmentation has near zero loss") {
  Mat<double> p = Mat<double>::Zero(4, 8);
  std::vector<std::uint8_t> labels(8);
  for (int j = 0; j < 8; ++j) {
    labels[j] = static_cast<std::uint8_t>(j % 4);
    p(j % 4, j) = 1.0;
  }
  const auto parts = loss_seg(p, labels);
  CHECK(parts.dice < 1e-4);
  CHECK(parts.ce == 0.0);
  CHECK(parts.total() < 1e-4);
}

TEST_CASE("uniform probabilities give ln 4 cross entropy and the closed-form dice") {
  const Mat<double> p = Mat<double>::Constant(4, 4, 0.25);
  const std::vector<std::uint8_t> labels = {0, 1, 2, 3};
  const auto parts = loss_seg(p, labels);
  CHECK(parts.ce == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(parts.ce == doctest::Approx(1.3863).epsilon(1e-4));
  // Per class: intersection 0.25, sum p^2 = 0.25, sum g^2 = 1.
  const double s = 1e-5;
  CHECK(parts.dice == doctest::Approx(1.0 - (0.5 + s) / (1.25 + s)).epsilon(1e-14));
}

TEST_CASE("confidently wrong segmentation hits the worst case") {
  Mat<double> p = Mat<double>::Zero(4, 4);
  const std::vector<std::uint8_t> labels = {0, 0, 1, 1};
  for (int j = 0; j < 4; ++j) p(labels[j] == 0 ? 2 : 3, j) = 1.0;
  const auto parts = loss_seg(p, labels);
  CHECK(parts.ce == doctest::Approx(-std::log(1e-12)));
  // Classes 0, 1 have no overlap; classes 2, 3 have prediction but no truth.
  CHECK(parts.dice > 0.99);
  CHECK_THROWS_AS(loss_seg(p, std::vector<std::uint8_t>{0, 0, 4, 1}), ArgumentError);
}

TEST_CASE("tv examples") {
  const std::vector<double> flat(27, 0.4);
  CHECK(loss_tv(cs(flat), Dims{3, 3, 3}) == 0.0);
  CHECK(loss_tv(cs(std::vector<double>{0, 1, 2, 3}), Dims{4, 1, 1}) == 1.0);
  CHECK(loss_tv(cs(std::vector<double>{0, 1, 2, 3}), Dims{1, 4, 1}) == 1.0);
  CHECK(loss_tv(cs(std::vector<double>{0, 1, 2, 3}), Dims{1, 1, 4}) == 1.0);
}

TEST_CASE("tv matches an enumeration on random 2x2x2 patches") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(8);
    for (double& x : v) x = u(rng);
    auto at = [&](int x, int y, int z) { return v[x + 2 * y + 4 * z]; };
    double sx = 0, sy = 0, sz = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        sx += std::abs(at(1, a, b) - at(0, a, b));
        sy += std::abs(at(a, 1, b) - at(a, 0, b));
        sz += std::abs(at(a, b, 1) - at(a, b, 0));
      }
    CHECK(loss_tv(cs(v), Dims{2, 2, 2}) == doctest::Approx((sx + sy + sz) / 4.0).epsilon(1e-14));
  }
}

TEST_CASE("tv of a constant is zero and replacing by the mean never increases it") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const Dims d{2 + t % 4, 2 + t % 3, 3};
    std::vector<double> v(d.count());
    double mean = 0;
    for (double& x : v) mean += (x = u(rng));
    mean /= static_cast<double>(v.size());
    const std::vector<double> c(v.size(), mean);
    CHECK(loss_tv(cs(c), d) == 0.0);
    CHECK(loss_tv(cs(c), d) <= loss_tv(cs(v), d));
  }
}

TEST_CASE("preact examples") {
  CHECK(loss_preact(Mat<double>(Mat<double>::Zero(5, 3))) == 0.0);
  Mat<double> one = Mat<double>::Zero(5, 1);
  one(0, 0) = 1.0;
  CHECK(loss_preact(one) == doctest::Approx(0.2));
  Mat<double> two(5, 2);
  two.col(0) << 1, 2, 0, 0, 0;
  two.col(1) << 0, 0, 3, 0, -1;
  CHECK(loss_preact(two) == doctest::Approx((5.0 + 10.0) / 2.0 / 5.0));
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  const double h = 1e-6;

  std::vector<double> pred(12), target(12);
  for (int i = 0; i < 12; ++i) {
    pred[i] = u(rng);
    target[i] = u(rng);
  }
  std::vector<double> g(12, 0.0);
  loss_mae(cs(pred), cs(target), std::span<double>(g), 2.0);
  const Dims d{3, 2, 2};
  std::vector<double> gt(12, 0.0);
  loss_tv(cs(pred), d, std::span<double>(gt), 0.5);
  for (int i = 0; i < 12; ++i) {
    auto p = pred, m = pred;
    p[i] += h;
    m[i] -= h;
    CHECK(g[i] == doctest::Approx(2.0 * (loss_mae(cs(p), cs(target)) - loss_mae(cs(m), cs(target))) / (2 * h))
                      .epsilon(1e-6));
    CHECK(gt[i] == doctest::Approx(0.5 * (loss_tv(cs(p), d) - loss_tv(cs(m), d)) / (2 * h)).epsilon(1e-6));
  }

  Mat<double> probs(4, 6);
  for (Eigen::Index i = 0; i < probs.size(); ++i) probs.data()[i] = u(rng);
  const std::vector<std::uint8_t> labels = {0, 1, 2, 3, 1, 2};
  Mat<double> gs = Mat<double>::Zero(4, 6);
  loss_seg(probs, labels, &gs, 1.5);
  Mat<double> gp = Mat<double>::Zero(4, 6);
  loss_preact(probs, &gp, 3.0);
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    Mat<double> p = probs, m = probs;
    p.data()[i] += h;
    m.data()[i] -= h;
    const double fd = (loss_seg(p, labels).total() - loss_seg(m, labels).total()) / (2 * h);
    CHECK(gs.data()[i] == doctest::Approx(1.5 * fd).epsilon(1e-6));
    const double fp = (loss_preact(p) - loss_preact(m)) / (2 * h);
    CHECK(gp.data()[i] == doctest::Approx(3.0 * fp).epsilon(1e-6));
  }
}
