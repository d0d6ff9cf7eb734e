#ifndef LSPST_TESTS_GRADCHECK_HPP
#define LSPST_TESTS_GRADCHECK_HPP

// Central finite-difference gradient oracle. Analytic float gradients are
// compared against difference quotients of a 64-bit re-evaluation of the
// forward on exact widened twins of the float inputs. The oracle never
// touches the backward path it checks.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "lspst/rng.hpp"
#include "lspst/tensor.hpp"

namespace gradcheck {

using lspst::BasicTape;
using lspst::BasicTensor;
using lspst::Rng;
using lspst::Shape;
using lspst::Tensor;

struct TensorTwin {
  Tensor f;                  // float side, requires_grad
  BasicTensor<double> d;     // exact widened twin
};

inline TensorTwin twin_randn(Shape s, Rng& rng, double stddev = 1.0) {
  TensorTwin t;
  t.f = Tensor::randn(s, rng, stddev, true);
  std::vector<double> vals(t.f.data().begin(), t.f.data().end());
  t.d = BasicTensor<double>::from_data(s, std::move(vals));
  return t;
}

inline TensorTwin twin_from(Shape s, const std::vector<double>& values) {
  TensorTwin t;
  std::vector<float> fv(values.begin(), values.end());
  t.f = Tensor::from_data(s, std::move(fv), true);
  std::vector<double> dv(t.f.data().begin(), t.f.data().end());
  t.d = BasicTensor<double>::from_data(s, std::move(dv));
  return t;
}

// Every value separated by at least `spacing`: keeps argmax selections stable
// under the finite-difference step (max pooling, channel max).
inline TensorTwin twin_separated(Shape s, Rng& rng, double spacing = 0.15) {
  const size_t n = size_t(s.numel());
  std::vector<int64_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = int64_t(i);
  for (size_t i = n - 1; i > 0; --i)
    std::swap(perm[i], perm[size_t(rng.below(uint64_t(i + 1)))]);
  std::vector<double> vals(n);
  for (size_t i = 0; i < n; ++i)
    vals[i] = spacing * (double(perm[i]) - double(n - 1) / 2);
  return twin_from(s, vals);
}

struct Report {
  double max_rel_err = 0;
  double forward_gap = 0;  // |float loss - double loss| / max(1, |loss|)
  int checked = 0;
};

// FloatLoss: Tensor(Tape&); DoubleLoss: BasicTensor<double>(BasicTape<double>&).
// `pairs` lists every (float tensor, double twin) whose gradient is checked;
// the float side must have requires_grad set before the forward ran.
template <class FloatLoss, class DoubleLoss>
Report check(FloatLoss float_loss, DoubleLoss double_loss,
             std::vector<TensorTwin> pairs, double step = 1e-2,
             int max_coords_per_tensor = 0, uint64_t coord_seed = 7) {
  for (auto& tw : pairs) tw.f.zero_grad();  // leaf grads persist across tapes
  BasicTape<float> tape(true);
  Tensor loss = float_loss(tape);
  tape.backward(loss);

  auto eval64 = [&]() {
    BasicTape<double> t64(false);
    return double_loss(t64).data()[0];
  };

  Report rep;
  const double base = eval64();
  rep.forward_gap =
      std::abs(double(loss.data()[0]) - base) / std::max(1.0, std::abs(base));

  std::vector<double> ad, fd;
  Rng pick(coord_seed);
  for (auto& tw : pairs) {
    auto dd = tw.d.data();
    double rms = 0;
    for (double v : dd) rms += v * v;
    rms = std::sqrt(rms / double(dd.size()));
    const double h = step * std::max(1.0, rms);

    std::vector<size_t> coords;
    if (max_coords_per_tensor <= 0 ||
        int64_t(dd.size()) <= max_coords_per_tensor) {
      coords.resize(dd.size());
      for (size_t i = 0; i < dd.size(); ++i) coords[i] = i;
    } else {
      for (int i = 0; i < max_coords_per_tensor; ++i)
        coords.push_back(size_t(pick.below(dd.size())));
    }

    const bool had_grad = tw.f.has_grad();
    for (size_t i : coords) {
      const double save = dd[i];
      dd[i] = save + h;
      const double fp = eval64();
      dd[i] = save - h;
      const double fm = eval64();
      dd[i] = save;
      fd.push_back((fp - fm) / (2.0 * h));
      ad.push_back(had_grad ? double(tw.f.grad()[i]) : 0.0);
      ++rep.checked;
    }
  }

  double gmax = 0;
  for (size_t i = 0; i < fd.size(); ++i)
    gmax = std::max({gmax, std::abs(fd[i]), std::abs(ad[i])});
  for (size_t i = 0; i < fd.size(); ++i) {
    const double denom = std::max({std::abs(fd[i]), 1e-3 * gmax, 1e-12});
    rep.max_rel_err = std::max(rep.max_rel_err,
                               std::abs(ad[i] - fd[i]) / denom);
  }
  return rep;
}

}  // namespace gradcheck

#endif
