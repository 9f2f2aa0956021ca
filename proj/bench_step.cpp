#include <chrono>
#include <cstdio>

#include "pncnn/datasets.hpp"
#include "pncnn/train.hpp"

using namespace pncnn;

int main() {
  Rng rng(1);
  InitSpec spec;
  ModelParams mp = init_model(spec, rng);
  std::printf("params: %zu\n", param_count(mp));

  Dataset data;
  for (int i = 0; i < 50; ++i) {
    Rng gr = Rng(7).substream(i);
    const Tensor img = render_digit(i % 10, 16, 16, gr);
    Sample s;
    s.field = subsample_superpixels(img, 75, SubsampleMode::kIntensity, gr);
    s.label = i % 10;
    data.push_back(std::move(s));
  }

  // single-sample gradient timing, probabilistic vs deterministic
  for (bool det : {false, true}) {
    const auto t0 = std::chrono::steady_clock::now();
    auto sg = detail::sample_gradient(mp, data[0], 1.0, det, Rng(3));
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("sample grad det=%d: %.3f s  loss=%.4f\n", det, dt, sg.loss);
  }

  // full batch-50 step, threaded
  AdamState st;
  TrainOptions opt;
  opt.threads = 0;
  std::vector<std::size_t> order(50);
  for (std::size_t i = 0; i < 50; ++i) order[i] = i;
  for (bool det : {false, true}) {
    opt.deterministic = det;
    const auto t0 = std::chrono::steady_clock::now();
    batch_step(mp, st, data, order, 0, 50, 0, 0, Tensor{}, opt);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("batch-50 step det=%d: %.3f s\n", det, dt);
  }

  // eval throughput
  const auto t0 = std::chrono::steady_clock::now();
  EvalResult er = evaluate(mp, data, false, 9);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("eval 50 samples: %.3f s (acc %.2f)\n", dt, er.accuracy);
  return 0;
}
