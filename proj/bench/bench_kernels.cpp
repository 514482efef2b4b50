#include <algorithm>
#include <chrono>
#include <cstdio>
#include <vector>

#include <CLI11.hpp>

#include "introspect/bnn.hpp"
#include "introspect/crf.hpp"
#include "introspect/dataio.hpp"
#include "introspect/exec.hpp"
#include "introspect/predictive.hpp"

using namespace introspect;

namespace {

template <class F>
double best_seconds(std::size_t repeats, F&& f) {
  double best = 1e300;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return best;
}

void report(const char* kernel, double serial, double parallel, bool identical) {
  std::printf("%-14s serial %9.4f s  parallel %9.4f s  speedup %5.2fx  identical %s\n", kernel, serial, parallel,
              serial / parallel, identical ? "yes" : "NO");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serial reference vs OpenMP timings of the batch kernels"};
  bool smoke = false;
  std::size_t workers = 0, repeats = 3;
  app.add_flag("--smoke", smoke, "tiny sizes, one repeat");
  app.add_option("--workers", workers, "OpenMP threads (0 = runtime default)");
  app.add_option("--repeats", repeats, "timed repetitions, best is reported");
  CLI11_PARSE(app, argc, argv);
  if (smoke) repeats = 1;
  set_worker_count(workers);
  std::printf("workers %zu\n", worker_count());

  const std::size_t items = smoke ? 64 : 4000, t = smoke ? 5 : 50;
  const RngStream root(2024, 0);
  const CdpParams params = init_params(16, 10, Variant::cdp, Architecture{{128, 128}, 0.1, 0.2}, root.derive(0));
  std::vector<std::vector<double>> xs;
  for (std::size_t i = 0; i < items; ++i) xs.push_back(std_normal(root.derive(1).derive(i), 16));
  const PosteriorSource source = CdpMasks{params, 0.1};
  std::vector<PredictiveResult> a, b;
  const double ps = best_seconds(repeats, [&] { a = predict_batch(source, xs, t, root.derive(2), Exec::serial); });
  const double pp = best_seconds(repeats, [&] { b = predict_batch(source, xs, t, root.derive(2), Exec::parallel); });
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].sample_probs == b[i].sample_probs;
  report("predict_batch", ps, pp, same);

  SceneGenConfig g;
  g.c = 6;
  g.groups = {{0, 1, 2}, {3, 4, 5}};
  g.scenes = smoke ? 16 : 400;
  g.min_instances = 4;
  g.max_instances = 8;
  g.unary_noise = 0.9;
  const SceneSet set = gen_scenes(g, root.derive(3));
  const CrfParams theta{1.5, 0.8};
  CrfObjective sa, pa;
  const double cs = best_seconds(repeats, [&] { sa = nll_and_grad(set.scenes, theta, Inference::lbp, {}, Exec::serial); });
  const double cp =
      best_seconds(repeats, [&] { pa = nll_and_grad(set.scenes, theta, Inference::lbp, {}, Exec::parallel); });
  report("crf_nll_grad", cs, cp, sa.nll == pa.nll && sa.grad_u == pa.grad_u && sa.grad_p == pa.grad_p);

  std::vector<Smoothed> ss, sp;
  const double ms = best_seconds(repeats, [&] { ss = smooth_all(set, theta, {}, Exec::serial); });
  const double mp = best_seconds(repeats, [&] { sp = smooth_all(set, theta, {}, Exec::parallel); });
  bool same_smooth = ss.size() == sp.size();
  for (std::size_t i = 0; same_smooth && i < ss.size(); ++i)
    same_smooth = ss[i].labels == sp[i].labels && ss[i].probs == sp[i].probs;
  report("crf_smooth", ms, mp, same_smooth);
  return same && same_smooth && sa.nll == pa.nll ? 0 : 1;
}
