#pragma once
#include <cmath>
#include <cstddef>
#include <memory>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "gp.hpp"
#include "pooling.hpp"
#include "rectified.hpp"
#include "rng.hpp"
#include "stochdiag.hpp"
#include "tensor.hpp"

namespace pncnn {

// a channel marks points absent from its grid with at least this much noise,
// which removes them from the effective fit
constexpr double kMissingVar = 1e10;

struct Sample {
  ObservedField field;
  int label = -1;
};

struct BlockParams {
  DiffusionOp op;  // K terms, maps c_in to c_mid
  Tensor mix;      // c_out x c_mid
  RbfHyper hyper;  // fit hyper for the block output field
};

struct ModelParams {
  RbfHyper hyper_in;
  Tensor log_noise;  // C_in log input noise variances
  std::vector<BlockParams> blocks;
  Tensor head_w;  // classes x c_last
  Tensor head_b;  // classes
  double lambda = 0.1;
  std::size_t probes = 20;
  bool box_head = false;

  std::size_t c_in() const { return log_noise.numel(); }
  std::size_t classes() const { return head_b.numel(); }
  std::size_t c_last() const { return blocks.empty() ? c_in() : blocks.back().mix.dim(0); }
};

// one stable traversal defines the packing order everywhere
template <class F>
void visit_params(ModelParams& mp, F&& f) {
  f(&mp.hyper_in.log_a, 1);
  f(&mp.hyper_in.log_l, 1);
  f(mp.log_noise.data(), mp.log_noise.numel());
  for (BlockParams& blk : mp.blocks) {
    f(blk.op.W.data(), blk.op.W.numel());
    f(blk.op.beta.data(), blk.op.beta.numel());
    f(blk.op.sigma_chol.data(), blk.op.sigma_chol.numel());
    f(blk.op.bias.data(), blk.op.bias.numel());
    f(blk.mix.data(), blk.mix.numel());
    f(&blk.hyper.log_a, 1);
    f(&blk.hyper.log_l, 1);
  }
  f(mp.head_w.data(), mp.head_w.numel());
  f(mp.head_b.data(), mp.head_b.numel());
}

inline std::size_t param_count(const ModelParams& mp) {
  std::size_t n = 0;
  visit_params(const_cast<ModelParams&>(mp), [&](double*, std::size_t k) { n += k; });
  return n;
}

inline std::vector<double> pack_params(const ModelParams& mp) {
  std::vector<double> out;
  out.reserve(param_count(mp));
  visit_params(const_cast<ModelParams&>(mp),
               [&](double* p, std::size_t k) { out.insert(out.end(), p, p + k); });
  return out;
}

inline void unpack_params(ModelParams& mp, const std::vector<double>& flat) {
  check_shape(flat.size() == param_count(mp), "unpack_params length mismatch");
  std::size_t at = 0;
  visit_params(mp, [&](double* p, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) p[i] = flat[at++];
  });
}

// channel mixing: means combine linearly, variances through squared weights
// because the channels are posterior-independent
inline MomentField mix_channels(const MomentField& in, const Tensor& m) {
  check_shape(m.rank() == 2 && m.dim(1) == in.c(), "mix_channels weight shape");
  MomentField out;
  out.Q = in.Q;
  out.mean = matmul(in.mean, m, false, true);
  Tensor msq = m;
  for (std::size_t i = 0; i < msq.numel(); ++i) msq[i] *= msq[i];
  out.var = matmul(in.var, msq, false, true);
  return out;
}

// channels live on different grids iff their missing-point patterns differ
inline bool per_channel_grids(const ObservedField& f) {
  const std::size_t n = f.n(), c = f.c();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j < c; ++j)
      if ((f.V(i, j) >= kMissingVar) != (f.V(i, 0) >= kMissingVar)) return true;
  return false;
}

inline ObservedField effective_field(const ModelParams& mp, const ObservedField& s) {
  check_shape(s.c() == mp.c_in(), "sample channels do not match the model input");
  ObservedField f = s;
  for (std::size_t i = 0; i < f.n(); ++i)
    for (std::size_t j = 0; j < f.c(); ++j) f.V(i, j) += std::exp(mp.log_noise(j));
  return f;
}

struct BlockResult {
  MomentField moments;  // post-mix at the eval points
  RbfGp gp;             // fresh fit on the mixed moments
  double nll_term = 0.0;
};

inline BlockResult forward_block(const RbfGp& gp_in, const BlockParams& blk, const Tensor& q,
                                 bool stochastic, std::size_t probes, Rng& rng) {
  const ConvolvedGpView view{&gp_in, &blk.op};
  const std::size_t m = q.dim(0), co = blk.op.c_out();
  const Tensor mean = conv_mean(view, q);
  Tensor var;
  if (stochastic) {
    var = stochastic_diag(conv_cov_matvec(view, q), m * co, probes, rng).reshaped({m, co});
    for (std::size_t i = 0; i < var.numel(); ++i) var[i] = std::max(var[i], 0.0);
  } else {
    var = conv_var_diag(view, q);
  }
  Tensor rmean = mean, rvar = var;
  for (std::size_t i = 0; i < mean.numel(); ++i) {
    const ReluMoments mo = relu_mean_var(mean[i], var[i]);
    rmean[i] = mo.mean;
    rvar[i] = mo.var;
  }
  MomentField mixed = mix_channels(MomentField{q, std::move(rmean), std::move(rvar)}, blk.mix);
  const ObservedField f{q, mixed.mean, mixed.var};
  BlockResult out;
  out.gp = fit(blk.hyper, f);
  out.nll_term = nll(blk.hyper, f);
  out.moments = std::move(mixed);
  return out;
}

struct ForwardTrace {
  std::vector<MomentField> moments;  // post-mix, one per block
  std::vector<double> nll_terms;     // input fit first, then one per block
  Tensor pooled;                     // c_last
  Tensor pooled_var;                 // c_last under box pooling, else empty
  Tensor logits;                     // classes
  double nll_total = 0.0;
};

namespace detail {

inline void finish_trace(const ModelParams& mp, const RbfGp& gp, ForwardTrace& tr) {
  if (mp.box_head) {
    BoxPooled bp = pool_box(gp);
    tr.pooled = std::move(bp.mean);
    tr.pooled_var = std::move(bp.var);
  } else {
    tr.pooled = pool_mean(gp);
  }
  const std::size_t classes = mp.classes(), cl = mp.c_last();
  check_shape(mp.head_w.rank() == 2 && mp.head_w.dim(0) == classes && mp.head_w.dim(1) == cl,
              "head weight shape");
  tr.logits = Tensor{{classes}};
  for (std::size_t k = 0; k < classes; ++k) {
    double acc = mp.head_b(k);
    for (std::size_t j = 0; j < cl; ++j) acc += mp.head_w(k, j) * tr.pooled(j);
    tr.logits(k) = acc;
  }
  tr.nll_total = 0.0;
  for (double v : tr.nll_terms) tr.nll_total += v;
}

}  // namespace detail

inline ForwardTrace forward(const ModelParams& mp, const ObservedField& sample, Rng& rng) {
  ForwardTrace tr;
  const ObservedField f0 = effective_field(mp, sample);
  RbfGp gp = fit(mp.hyper_in, f0);
  tr.nll_terms.push_back(nll(mp.hyper_in, f0));
  const bool stoch = per_channel_grids(sample);
  for (std::size_t l = 0; l < mp.blocks.size(); ++l) {
    BlockResult br = forward_block(gp, mp.blocks[l], sample.X, stoch && l == 0, mp.probes, rng);
    gp = std::move(br.gp);
    tr.moments.push_back(std::move(br.moments));
    tr.nll_terms.push_back(br.nll_term);
  }
  detail::finish_trace(mp, gp, tr);
  return tr;
}

// uncertainty switched off: conv means only, hard ReLU, zero-variance refits
inline ForwardTrace forward_deterministic(const ModelParams& mp, const ObservedField& sample) {
  ForwardTrace tr;
  const ObservedField f0 = effective_field(mp, sample);
  RbfGp gp = fit(mp.hyper_in, f0);
  tr.nll_terms.push_back(nll(mp.hyper_in, f0));
  const std::size_t n = sample.n();
  for (const BlockParams& blk : mp.blocks) {
    const ConvolvedGpView view{&gp, &blk.op};
    Tensor rmean = conv_mean(view, sample.X);
    for (std::size_t i = 0; i < rmean.numel(); ++i) rmean[i] = std::max(rmean[i], 0.0);
    MomentField mixed = mix_channels(
        MomentField{sample.X, std::move(rmean), Tensor{{n, blk.op.c_out()}}}, blk.mix);
    const ObservedField f{sample.X, mixed.mean, mixed.var};
    gp = fit(blk.hyper, f);
    tr.nll_terms.push_back(nll(blk.hyper, f));
    tr.moments.push_back(std::move(mixed));
  }
  detail::finish_trace(mp, gp, tr);
  return tr;
}

inline double cross_entropy(const Tensor& logits, int label) {
  check_shape(label >= 0 && static_cast<std::size_t>(label) < logits.numel(),
              "cross_entropy label out of range");
  double mx = logits[0];
  for (std::size_t i = 1; i < logits.numel(); ++i) mx = std::max(mx, logits[i]);
  double lse = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) lse += std::exp(logits[i] - mx);
  return mx + std::log(lse) - logits[static_cast<std::size_t>(label)];
}

// w_c = n_total / (n_classes n_c); uniform counts give unit weights
inline Tensor inverse_frequency_weights(const std::vector<int>& labels, std::size_t classes) {
  Tensor counts{{classes}};
  for (int l : labels) {
    check_shape(l >= 0 && static_cast<std::size_t>(l) < classes, "label out of range");
    counts(static_cast<std::size_t>(l)) += 1.0;
  }
  Tensor w{{classes}};
  const double total = static_cast<double>(labels.size());
  for (std::size_t c = 0; c < classes; ++c)
    w(c) = counts(c) > 0.0 ? total / (static_cast<double>(classes) * counts(c)) : 0.0;
  return w;
}

inline double loss_value(const ForwardTrace& tr, int label, double class_weight, double lambda) {
  return class_weight * cross_entropy(tr.logits, label) + lambda * tr.nll_total;
}

struct BlockVars {
  ad::Var w, beta, sigma_chol, bias, mix, log_a, log_l;
};

struct ModelVars {
  ad::Var log_a_in, log_l_in, log_noise;
  std::vector<BlockVars> blocks;
  ad::Var head_w, head_b;
};

inline ModelVars make_model_vars(ad::Tape& tp, const ModelParams& mp) {
  ModelVars v;
  v.log_a_in = tp.leaf(Tensor::scalar(mp.hyper_in.log_a), true);
  v.log_l_in = tp.leaf(Tensor::scalar(mp.hyper_in.log_l), true);
  v.log_noise = tp.leaf(mp.log_noise, true);
  for (const BlockParams& blk : mp.blocks) {
    BlockVars bv;
    bv.w = tp.leaf(blk.op.W, true);
    bv.beta = tp.leaf(blk.op.beta, true);
    bv.sigma_chol = tp.leaf(blk.op.sigma_chol, true);
    bv.bias = tp.leaf(blk.op.bias, true);
    bv.mix = tp.leaf(blk.mix, true);
    bv.log_a = tp.leaf(Tensor::scalar(blk.hyper.log_a), true);
    bv.log_l = tp.leaf(Tensor::scalar(blk.hyper.log_l), true);
    v.blocks.push_back(bv);
  }
  v.head_w = tp.leaf(mp.head_w, true);
  v.head_b = tp.leaf(mp.head_b, true);
  return v;
}

// gradient of the packed vector, matching visit_params order
inline std::vector<double> collect_param_grads(const ad::Tape& tp, const ModelVars& v) {
  std::vector<double> out;
  const auto push = [&](ad::Var x) {
    const Tensor g = tp.grad_of(x);
    out.insert(out.end(), g.data(), g.data() + g.numel());
  };
  push(v.log_a_in);
  push(v.log_l_in);
  push(v.log_noise);
  for (const BlockVars& bv : v.blocks) {
    push(bv.w);
    push(bv.beta);
    push(bv.sigma_chol);
    push(bv.bias);
    push(bv.mix);
    push(bv.log_a);
    push(bv.log_l);
  }
  push(v.head_w);
  push(v.head_b);
  return out;
}

inline ad::Var box_mean_graph(ad::Tape& tp, ad::Var alpha, ad::Var log_a, ad::Var log_l,
                              const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.dim(1), c = tp.val(alpha).dim(1);
  const ad::Var invl = tp.vexp(tp.neg(log_l));
  ad::Var pk{-1};
  for (std::size_t j = 0; j < d; ++j) {
    Tensor cj{{n}};
    for (std::size_t i = 0; i < n; ++i) cj(i) = x(i, j);
    const ad::Var cv = tp.constant(std::move(cj));
    const ad::Var fj =
        tp.sub(tp.ncdf(tp.mul(cv, invl)), tp.ncdf(tp.mul(tp.shift(cv, -1.0), invl)));
    pk = j == 0 ? fj : tp.mul(pk, fj);
  }
  pk = tp.mul(pk, tp.vexp(log_a));
  return tp.reshape(tp.matmul(tp.reshape(pk, {1, n}), alpha), {c});
}

struct GraphTrace {
  ad::Var loss, ce, nll_sum, logits, pooled;
  std::vector<ad::Var> block_means, block_vars;  // post-mix
};

// full training-path graph for one sample; with deterministic set, the
// variance machinery is bypassed and refits run on zero-variance targets
inline GraphTrace forward_graph(ad::Tape& tp, const ModelVars& v, const ModelParams& mp,
                                const ObservedField& sample, int label, bool deterministic,
                                double class_weight, Rng& rng) {
  const std::size_t n = sample.n(), d = sample.d(), c_in = sample.c();
  check_shape(n >= 1, "forward_graph wants observations");
  check_shape(c_in == mp.c_in(), "sample channels do not match the model input");
  auto xsqd = std::make_shared<const Tensor>(pairwise_sqdist(sample.X, sample.X));
  auto offs = std::make_shared<const Tensor>(pairwise_offset(sample.X, sample.X));

  const bool stoch = per_channel_grids(sample);
  const ad::Var vin = tp.add_rowvec(tp.constant(sample.V), tp.vexp(v.log_noise));
  // the stochastic variance path is the only consumer of the explicit inverse
  GpGraph gp = fit_graph(tp, v.log_a_in, v.log_l_in, d, xsqd, tp.constant(sample.Y), vin,
                         stoch && !deterministic && !v.blocks.empty());

  GraphTrace out;
  out.nll_sum = gp.nll;
  ad::Var log_a_cur = v.log_a_in, log_l_cur = v.log_l_in;

  for (std::size_t l = 0; l < v.blocks.size(); ++l) {
    const BlockVars& bv = v.blocks[l];
    const std::size_t co = tp.val(bv.w).dim(1);
    const std::size_t c_next = tp.val(bv.mix).dim(0);
    ad::Var mean2{-1}, var2{-1};
    if (deterministic) {
      const ConvGraph cg = conv_graph(tp, gp, log_a_cur, log_l_cur, d, offs, bv.w, bv.beta,
                                      bv.sigma_chol, bv.bias, 1.0, false);
      mean2 = tp.matmul(tp.relu(cg.mean), bv.mix, false, true);
      var2 = tp.constant(Tensor{{n, c_next}});
    } else {
      const bool use_stoch = stoch && l == 0;
      const ConvGraph cg = conv_graph(tp, gp, log_a_cur, log_l_cur, d, offs, bv.w, bv.beta,
                                      bv.sigma_chol, bv.bias, 1.0, !use_stoch);
      ad::Var var = cg.var;
      if (use_stoch) {
        std::vector<Tensor> probes(mp.probes, Tensor{{n, co}});
        for (Tensor& z : probes)
          for (std::size_t i = 0; i < z.numel(); ++i) z[i] = rng.gaussian();
        var = conv_var_stoch_graph(tp, gp, log_a_cur, log_l_cur, d, offs, offs, bv.w, bv.beta,
                                   bv.sigma_chol, 1.0, probes);
      }
      mean2 = tp.matmul(tp.relu_mean(cg.mean, var), bv.mix, false, true);
      var2 = tp.matmul(tp.relu_var(cg.mean, var), tp.square(bv.mix), false, true);
    }
    gp = fit_graph(tp, bv.log_a, bv.log_l, d, xsqd, mean2, var2);
    out.nll_sum = tp.add(out.nll_sum, gp.nll);
    out.block_means.push_back(mean2);
    out.block_vars.push_back(var2);
    log_a_cur = bv.log_a;
    log_l_cur = bv.log_l;
  }

  out.pooled = mp.box_head ? box_mean_graph(tp, gp.alpha, log_a_cur, log_l_cur, sample.X)
                           : tp.mul(tp.colsum(gp.alpha), tp.vexp(log_a_cur));
  const std::size_t cl = tp.val(out.pooled).numel(), classes = tp.val(v.head_b).numel();
  out.logits = tp.reshape(
      tp.add_rowvec(tp.matmul(tp.reshape(out.pooled, {1, cl}), v.head_w, false, true), v.head_b),
      {classes});
  check_shape(label >= 0 && static_cast<std::size_t>(label) < classes,
              "forward_graph label out of range");
  out.ce = tp.sub(tp.logsumexp(out.logits), tp.pick(out.logits, static_cast<std::size_t>(label)));
  out.loss = tp.add(tp.scale(out.ce, class_weight), tp.scale(out.nll_sum, mp.lambda));
  return out;
}

}  // namespace pncnn
