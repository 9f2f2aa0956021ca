#pragma once
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "pncnn/autodiff.hpp"
#include "pncnn/rng.hpp"
#include "pncnn/tensor.hpp"

namespace testsup {

inline pncnn::Tensor random_tensor(std::vector<std::size_t> shape, pncnn::Rng& rng,
                                   double lo = -1.0, double hi = 1.0) {
  pncnn::Tensor t{std::move(shape)};
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

inline pncnn::Tensor random_spd(std::size_t n, pncnn::Rng& rng, double boost = 1.0) {
  pncnn::Tensor b = random_tensor({n, n}, rng);
  pncnn::Tensor a = pncnn::matmul(b, b, false, true);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += boost * (double)n * 0.5;
  return a;
}

// Gauss-Jordan with partial pivoting; independent of the library's Cholesky path
inline pncnn::Tensor gj_inverse(pncnn::Tensor a) {
  const std::size_t n = a.dim(0);
  pncnn::Tensor inv = pncnn::eye(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a(r, col)) > std::fabs(a(piv, col))) piv = r;
    for (std::size_t j = 0; j < n; ++j) {
      std::swap(a(col, j), a(piv, j));
      std::swap(inv(col, j), inv(piv, j));
    }
    const double p = a(col, col);
    for (std::size_t j = 0; j < n; ++j) {
      a(col, j) /= p;
      inv(col, j) /= p;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col);
      for (std::size_t j = 0; j < n; ++j) {
        a(r, j) -= f * a(col, j);
        inv(r, j) -= f * inv(col, j);
      }
    }
  }
  return inv;
}

inline double gj_logdet(pncnn::Tensor a) {
  const std::size_t n = a.dim(0);
  double ld = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a(r, col)) > std::fabs(a(piv, col))) piv = r;
    if (piv != col)
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
    ld += std::log(std::fabs(a(col, col)));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
    }
  }
  return ld;
}

using BuildFn = std::function<pncnn::ad::Var(pncnn::ad::Tape&, const std::vector<pncnn::ad::Var>&)>;

// Reverse-mode gradient vs central finite differences for every coordinate
// of every input.
inline void check_grad(const std::vector<pncnn::Tensor>& inputs, const BuildFn& f,
                       double tol = 2e-6, double h = 1e-5) {
  using pncnn::Tensor;
  using pncnn::ad::Tape;
  using pncnn::ad::Var;
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  Var loss = f(tape, vars);
  REQUIRE(tape.val(loss).numel() == 1);
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (auto v : vars) grads.push_back(tape.grad_of(v));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t2;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t2.leaf(x, false));
    return t2.val(f(t2, vs)).value();
  };

  for (std::size_t p = 0; p < inputs.size(); ++p) {
    for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
      std::vector<Tensor> xs = inputs;
      xs[p][i] += h;
      const double fp = eval(xs);
      xs[p][i] -= 2 * h;
      const double fm = eval(xs);
      const double fd = (fp - fm) / (2 * h);
      const double adg = grads[p][i];
      const double scale = std::max({std::fabs(fd), std::fabs(adg), 1.0});
      INFO("input " << p << " coord " << i << " ad=" << adg << " fd=" << fd);
      REQUIRE(std::fabs(adg - fd) <= tol * scale);
    }
  }
}

// contract output against fixed pseudo-random weights so transposition and
// indexing bugs cannot cancel in a plain sum
inline pncnn::ad::Var weighted(pncnn::ad::Tape& t, pncnn::ad::Var out, std::uint64_t salt = 1) {
  const pncnn::Tensor& v = t.val(out);
  pncnn::Tensor w{{v.numel()}};
  pncnn::Rng rng(9000 + salt);
  for (std::size_t i = 0; i < w.numel(); ++i) w(i) = -1.0 + 2.0 * rng.uniform();
  pncnn::ad::Var flat = t.reshape(out, {v.numel()});
  return t.dotv(flat, t.constant(w));
}

}  // namespace testsup
