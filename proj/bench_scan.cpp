#include <chrono>
#include <cstdio>

#include "pncnn/datasets.hpp"
#include "pncnn/train.hpp"

using namespace pncnn;

static Sample make_sample() {
  Rng gr(7);
  const Tensor img = render_digit(3, 16, 16, gr);
  Sample s;
  s.field = subsample_superpixels(img, 75, SubsampleMode::kIntensity, gr);
  s.label = 3;
  return s;
}

static double t_grad(const ModelParams& mp, const Sample& s, bool det, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r)
    (void)detail::sample_gradient(mp, s, 1.0, det, Rng(3));
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

static double t_value(const ModelParams& mp, const Sample& s, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) {
    Rng rng(3);
    (void)forward(mp, s.field, rng);
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

static double t_fwd_graph(const ModelParams& mp, const Sample& s, int reps) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) {
    ad::Tape tp;
    const ModelVars v = make_model_vars(tp, mp);
    Rng rng(3);
    (void)forward_graph(tp, v, mp, s.field, s.label, false, 1.0, rng);
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

int main() {
  const Sample s = make_sample();
  struct Conf {
    const char* name;
    std::size_t blocks, channels, basis;
  };
  const Conf confs[] = {
      {"L2 c32 K9", 2, 32, 9}, {"L2 c32 K5", 2, 32, 5}, {"L2 c16 K9", 2, 16, 9},
      {"L1 c32 K9", 1, 32, 9}, {"L2 c8  K9", 2, 8, 9},
  };
  for (const Conf& c : confs) {
    Rng rng(1);
    InitSpec spec;
    spec.blocks = c.blocks;
    spec.channels = c.channels;
    spec.basis = c.basis;
    ModelParams mp = init_model(spec, rng);
    std::printf("%s: grad %.1f ms | graph-fwd %.1f ms | value-fwd %.1f ms | det-grad %.1f ms\n",
                c.name, 1e3 * t_grad(mp, s, false, 3), 1e3 * t_fwd_graph(mp, s, 3),
                1e3 * t_value(mp, s, 3), 1e3 * t_grad(mp, s, true, 3));
  }
  return 0;
}
