#pragma once
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

#include "model.hpp"
#include "optimizer.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pncnn {

using Dataset = std::vector<Sample>;

struct InitSpec {
  std::size_t d = 2;
  std::size_t c_in = 1;
  std::size_t classes = 10;
  std::size_t blocks = 2;
  std::size_t channels = 32;
  std::size_t basis = 9;  // filter bank size K
  double lambda = 0.1;
  std::size_t probes = 20;
  bool box_head = false;
  double length_scale = 0.1;
};

// scale-preserving random init: unit prior variance kernels, Xavier-style
// weights, drift/diffusion widths a fraction of the kernel length scale
inline ModelParams init_model(const InitSpec& spec, Rng& rng) {
  check_shape(spec.blocks >= 1 && spec.channels >= 1 && spec.basis >= 1, "degenerate model spec");
  const double l = spec.length_scale;
  const double a0 = std::pow(kTwoPi * l * l, 0.5 * static_cast<double>(spec.d));
  ModelParams mp;
  mp.hyper_in = RbfHyper::from_al(a0, l, spec.d);
  mp.log_noise = Tensor{{spec.c_in}, std::log(1e-2)};
  mp.lambda = spec.lambda;
  mp.probes = spec.probes;
  mp.box_head = spec.box_head;
  for (std::size_t b = 0; b < spec.blocks; ++b) {
    const std::size_t ci = b == 0 ? spec.c_in : spec.channels;
    BlockParams blk;
    blk.op.W = Tensor{{spec.basis, spec.channels, ci}};
    const double wscale = 1.0 / std::sqrt(static_cast<double>(spec.basis * ci));
    for (std::size_t i = 0; i < blk.op.W.numel(); ++i) blk.op.W[i] = wscale * rng.gaussian();
    blk.op.beta = Tensor{{spec.basis, spec.d}};
    for (std::size_t i = 0; i < blk.op.beta.numel(); ++i)
      blk.op.beta(i / spec.d, i % spec.d) = l * (rng.uniform() - 0.5);
    blk.op.sigma_chol = Tensor{{spec.basis, spec.d, spec.d}};
    for (std::size_t k = 0; k < spec.basis; ++k)
      for (std::size_t j = 0; j < spec.d; ++j)
        blk.op.sigma_chol(k, j, j) = l * (0.3 + 0.3 * rng.uniform());
    blk.op.bias = Tensor{{spec.channels}};
    blk.mix = Tensor{{spec.channels, spec.channels}};
    const double mscale = 1.0 / std::sqrt(static_cast<double>(spec.channels));
    for (std::size_t i = 0; i < blk.mix.numel(); ++i) blk.mix[i] = mscale * rng.gaussian();
    blk.hyper = RbfHyper::from_al(a0, l, spec.d);
    mp.blocks.push_back(std::move(blk));
  }
  mp.head_w = Tensor{{spec.classes, spec.channels}};
  for (std::size_t i = 0; i < mp.head_w.numel(); ++i)
    mp.head_w[i] = rng.gaussian() / std::sqrt(static_cast<double>(spec.channels));
  mp.head_b = Tensor{{spec.classes}};
  return mp;
}

struct TrainOptions {
  AdamConfig adam{};
  std::size_t batch = 50;
  std::size_t epochs = 10;
  std::size_t threads = 0;  // 0 picks the hardware count
  bool deterministic = false;
  bool weight_classes = false;
  double stop_at_test_error = -1.0;  // negative disables early stopping
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double nll = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

namespace detail {

inline std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.numel(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

struct SampleGrad {
  std::vector<double> grad;
  double loss = 0.0, ce = 0.0, nll = 0.0;
  bool correct = false;
};

inline SampleGrad sample_gradient(const ModelParams& mp, const Sample& s, double class_weight,
                                  bool deterministic, Rng rng) {
  ad::Tape tp;
  const ModelVars v = make_model_vars(tp, mp);
  const GraphTrace g =
      forward_graph(tp, v, mp, s.field, s.label, deterministic, class_weight, rng);
  tp.backward(g.loss);
  SampleGrad out;
  out.grad = collect_param_grads(tp, v);
  out.loss = tp.val(g.loss).value();
  out.ce = tp.val(g.ce).value();
  out.nll = tp.val(g.nll_sum).value();
  out.correct = argmax(tp.val(g.logits)) == static_cast<std::size_t>(s.label);
  return out;
}

inline std::size_t pick_threads(std::size_t requested, std::size_t work) {
  std::size_t n = requested ? requested : std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  return std::max<std::size_t>(1, std::min(n, work));
}

// run fn(i) for i in [0, work) on a small pool; fn must only touch slot i
template <typename Fn>
inline void parallel_for(std::size_t work, std::size_t threads, const Fn& fn) {
  const std::size_t nt = pick_threads(threads, work);
  if (nt <= 1) {
    for (std::size_t i = 0; i < work; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto drain = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < work;) fn(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(drain);
  drain();
  for (std::thread& th : pool) th.join();
}

}  // namespace detail

struct BatchStats {
  double loss = 0.0, ce = 0.0, nll = 0.0;
  std::size_t correct = 0, count = 0;
};

// one optimizer step on samples order[begin, end); per-sample rngs are keyed
// (epoch, batch, slot) so thread count never changes the result, and the
// gradient reduction walks slots in index order for bitwise determinism
inline BatchStats batch_step(ModelParams& mp, AdamState& st, const Dataset& data,
                             const std::vector<std::size_t>& order, std::size_t begin,
                             std::size_t end, std::size_t epoch, std::size_t batch_index,
                             const Tensor& class_w, const TrainOptions& opt) {
  const std::size_t bs = end - begin;
  check_shape(bs >= 1, "batch_step wants samples");
  std::vector<detail::SampleGrad> slots(bs);
  const Rng root(opt.seed);
  detail::parallel_for(bs, opt.threads, [&](std::size_t i) {
    const Sample& s = data[order[begin + i]];
    const double w =
        class_w.numel() > 0 ? class_w(static_cast<std::size_t>(s.label)) : 1.0;
    slots[i] = detail::sample_gradient(mp, s, w, opt.deterministic,
                                       root.substream(epoch, batch_index, i));
  });

  BatchStats bstat;
  bstat.count = bs;
  std::vector<double> grad(slots[0].grad.size(), 0.0);
  for (const detail::SampleGrad& sg : slots) {
    check_shape(sg.grad.size() == grad.size(), "gradient length drift across samples");
    for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += sg.grad[j];
    bstat.loss += sg.loss;
    bstat.ce += sg.ce;
    bstat.nll += sg.nll;
    bstat.correct += sg.correct ? 1 : 0;
  }
  const double inv = 1.0 / static_cast<double>(bs);
  for (double& g : grad) g *= inv;

  std::vector<double> params = pack_params(mp);
  adam_step(params, grad, st, opt.adam);
  unpack_params(mp, params);
  return bstat;
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<int> labels;
  std::vector<int> predicted;
  Tensor logits;  // n x classes
};

inline EvalResult evaluate(const ModelParams& mp, const Dataset& data, bool deterministic,
                           std::uint64_t seed, std::size_t threads = 0) {
  EvalResult r;
  const std::size_t n = data.size();
  if (n == 0) return r;
  const std::size_t classes = mp.classes();
  r.labels.resize(n);
  r.predicted.resize(n);
  r.logits = Tensor{{n, classes}};
  const Rng root(seed);
  std::atomic<bool> failed{false};
  detail::parallel_for(n, threads, [&](std::size_t i) {
    if (failed.load()) return;
    try {
      Rng rng = root.substream(0xE7A1, i);
      const ForwardTrace tr = deterministic ? forward_deterministic(mp, data[i].field)
                                            : forward(mp, data[i].field, rng);
      for (std::size_t k = 0; k < classes; ++k) r.logits(i, k) = tr.logits(k);
      r.labels[i] = data[i].label;
      r.predicted[i] = static_cast<int>(detail::argmax(tr.logits));
    } catch (...) {
      failed.store(true);
    }
  });
  if (failed.load()) throw Error("evaluation failed on a sample");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += r.predicted[i] == r.labels[i] ? 1 : 0;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

// rank-sum AUROC with midranks for ties; labels are 0/1
inline double auroc(const std::vector<double>& score, const std::vector<int>& label) {
  check_shape(score.size() == label.size(), "auroc lengths differ");
  const std::size_t n = score.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && score[idx[j + 1]] == score[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double rpos = 0.0;
  std::size_t npos = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (label[k] == 1) {
      rpos += rank[k];
      ++npos;
    }
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) return 0.5;
  return (rpos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1)) /
         (static_cast<double>(npos) * static_cast<double>(nneg));
}

inline double average_precision(const std::vector<double>& score, const std::vector<int>& label) {
  check_shape(score.size() == label.size(), "average_precision lengths differ");
  const std::size_t n = score.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  double ap = 0.0;
  std::size_t hits = 0, npos = 0;
  for (int l : label) npos += l == 1 ? 1 : 0;
  if (npos == 0) return 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (label[idx[k]] == 1) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  return ap / static_cast<double>(npos);
}

// epochs [start_epoch, opt.epochs); shuffles and per-sample rngs are keyed by
// the absolute epoch index, so a resumed run replays the exact remaining work
inline std::vector<EpochMetrics> train_loop(
    ModelParams& mp, AdamState& st, const Dataset& train, const Dataset& test,
    const TrainOptions& opt, std::size_t start_epoch = 0,
    const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  check_shape(!train.empty(), "train_loop wants training data");
  const std::size_t classes = mp.classes();
  Tensor class_w;
  if (opt.weight_classes) {
    std::vector<int> labels;
    labels.reserve(train.size());
    for (const Sample& s : train) labels.push_back(s.label);
    class_w = inverse_frequency_weights(labels, classes);
  }
  const Rng root(opt.seed);
  std::vector<EpochMetrics> out;
  for (std::size_t epoch = start_epoch; epoch < opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler = root.substream(~0ull, epoch);
    shuffler.shuffle(order);

    EpochMetrics em;
    em.epoch = epoch;
    double loss_sum = 0.0, nll_sum = 0.0;
    std::size_t correct = 0, seen = 0, batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opt.batch, ++batch_index) {
      const std::size_t end = std::min(begin + opt.batch, order.size());
      const BatchStats bs =
          batch_step(mp, st, train, order, begin, end, epoch, batch_index, class_w, opt);
      loss_sum += bs.loss;
      nll_sum += bs.nll;
      correct += bs.correct;
      seen += bs.count;
    }
    em.loss = loss_sum / static_cast<double>(seen);
    em.nll = nll_sum / static_cast<double>(seen);
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.test_acc = test.empty()
                      ? 0.0
                      : evaluate(mp, test, opt.deterministic, opt.seed, opt.threads).accuracy;
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(em);
    if (on_epoch) on_epoch(em);
    if (opt.stop_at_test_error >= 0.0 && !test.empty() &&
        1.0 - em.test_acc <= opt.stop_at_test_error)
      break;
  }
  return out;
}

}  // namespace pncnn
