#include "fieldsynth/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fieldsynth/error.hpp"

namespace fieldsynth::train {

template <typename T>
T loss_mae(std::span<const T> pred, std::span<const T> target, std::span<T> grad, T scale) {
  if (pred.size() != target.size()) throw ArgumentError("MAE inputs differ in length");
  if (pred.empty()) throw ArgumentError("MAE of an empty input");
  const T inv_n = T(1) / static_cast<T>(pred.size());
  T sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    sum += std::abs(d);
    if (!grad.empty()) grad[i] += scale * inv_n * static_cast<T>((d > T(0)) - (d < T(0)));
  }
  return sum * inv_n;
}

template <typename T>
SegLossParts loss_seg(const Mat<T>& probs, std::span<const std::uint8_t> labels, Mat<T>* grad, T scale) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (probs.rows() != kNumClasses || probs.cols() != n) throw ArgumentError("probability batch must be 4 x n");
  if (n == 0) throw ArgumentError("segmentation loss of an empty batch");
  for (auto l : labels)
    if (l >= kNumClasses) throw ArgumentError("label out of range: " + std::to_string(l));

  const T s = static_cast<T>(kDiceSmooth);
  const T inv_c = T(1) / T(kNumClasses);
  const T inv_n = T(1) / static_cast<T>(n);
  SegLossParts parts;
  T dice_sum = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    T inter = 0, pp = 0, gg = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const T p = probs(c, j);
      const T g = labels[static_cast<std::size_t>(j)] == c ? T(1) : T(0);
      inter += p * g;
      pp += p * p;
      gg += g;
    }
    const T num = T(2) * inter + s;
    const T den = pp + gg + s;
    dice_sum += num / den;
    if (grad) {
      // d(num/den)/dp = (2 g den - num 2 p) / den^2, with the -1/C factor.
      for (Eigen::Index j = 0; j < n; ++j) {
        const T p = probs(c, j);
        const T g = labels[static_cast<std::size_t>(j)] == c ? T(1) : T(0);
        (*grad)(c, j) += scale * (-inv_c) * (T(2) * g * den - num * T(2) * p) / (den * den);
      }
    }
  }
  parts.dice = static_cast<double>(T(1) - inv_c * dice_sum);

  T ce = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const int c = labels[static_cast<std::size_t>(j)];
    const T p = probs(c, j);
    const T floor = static_cast<T>(kProbFloor);
    ce -= std::log(std::max(p, floor));
    if (grad && p > floor) (*grad)(c, j) += scale * (-inv_n / p);
  }
  parts.ce = static_cast<double>(ce * inv_n);
  return parts;
}

template <typename T>
T loss_tv(std::span<const T> values, Dims dims, std::span<T> grad, T scale) {
  if (values.size() != dims.count()) throw ArgumentError("TV input does not match dims");
  T total = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = dims[axis];
    if (n < 2) continue;
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(dims.nx)
                                                          : static_cast<std::size_t>(dims.nx) * dims.ny);
    const std::size_t diffs = dims.count() / static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1);
    const T inv = T(1) / static_cast<T>(diffs);
    T sum = 0;
    for (int z = 0; z < dims.nz; ++z)
      for (int y = 0; y < dims.ny; ++y)
        for (int x = 0; x < dims.nx; ++x) {
          const int pos = axis == 0 ? x : (axis == 1 ? y : z);
          if (pos + 1 >= n) continue;
          const std::size_t i = dims.index(x, y, z);
          const T d = values[i + stride] - values[i];
          sum += std::abs(d);
          if (!grad.empty()) {
            const T g = scale * inv * static_cast<T>((d > T(0)) - (d < T(0)));
            grad[i + stride] += g;
            grad[i] -= g;
          }
        }
    total += sum * inv;
  }
  return total;
}

template <typename T>
T loss_preact(const Mat<T>& pre, Mat<T>* grad, T scale) {
  if (pre.cols() == 0) return T(0);
  const T inv = T(1) / static_cast<T>(pre.size());
  if (grad) *grad += (scale * T(2) * inv) * pre;
  return pre.squaredNorm() * inv;
}

#define FIELDSYNTH_INSTANTIATE(T)                                                          \
  template T loss_mae(std::span<const T>, std::span<const T>, std::span<T>, T);            \
  template SegLossParts loss_seg(const Mat<T>&, std::span<const std::uint8_t>, Mat<T>*, T); \
  template T loss_tv(std::span<const T>, Dims, std::span<T>, T);                           \
  template T loss_preact(const Mat<T>&, Mat<T>*, T);

FIELDSYNTH_INSTANTIATE(float)
FIELDSYNTH_INSTANTIATE(double)

#undef FIELDSYNTH_INSTANTIATE

}  // namespace fieldsynth::train
