#include "dgik/evalkit.hpp"

#include "dgik/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace dgik {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kRadToDeg = 180.0 / std::numbers::pi;

template <class Fn>
void parallel_for(int count, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto run = [&](int w) {
    try {
      for (int i = w; i < count; i += workers) fn(i);
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Quartiles infinite_quartiles() { return {kInf, kInf, kInf, kInf, kInf, kInf}; }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<Eigen::VectorXd> angle_vectors(const std::vector<Configuration>& qs) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(qs.size());
  for (const auto& q : qs) out.push_back(q.angles);
  return out;
}

Eigen::MatrixXd pooled_sq_distances(const std::vector<Eigen::VectorXd>& Z) {
  const auto n = static_cast<Eigen::Index>(Z.size());
  Eigen::MatrixXd D(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = wrapped_distance(Z[static_cast<std::size_t>(i)], Z[static_cast<std::size_t>(j)]);
      D(i, j) = D(j, i) = d * d;
    }
  }
  return D;
}

Eigen::MatrixXd kernel_from_sq(const Eigen::MatrixXd& D2, const std::vector<double>& bandwidths) {
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(D2.rows(), D2.cols());
  for (double h : bandwidths) {
    if (!(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "mmd: bandwidths must be positive");
    K.array() += (-D2.array() / (2.0 * h * h)).exp();
  }
  return K;
}

// MMD² from a pooled Gram matrix given the index sets of the two samples.
double mmd2_from_gram(const Eigen::MatrixXd& K, const std::vector<int>& xi, const std::vector<int>& yi, bool biased) {
  const double m = static_cast<double>(xi.size()), n = static_cast<double>(yi.size());
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (int a : xi)
    for (int b : xi)
      if (biased || a != b) kxx += K(a, b);
  for (int a : yi)
    for (int b : yi)
      if (biased || a != b) kyy += K(a, b);
  for (int a : xi)
    for (int b : yi) kxy += K(a, b);
  if (biased) return kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n);
  return kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
}

void check_mmd_inputs(std::size_t m, std::size_t n, bool biased) {
  if (m == 0 || n == 0) throw Error(ErrorCode::InvalidArgument, "mmd: both samples must be nonempty");
  if (!biased && (m < 2 || n < 2))
    throw Error(ErrorCode::InvalidArgument, "mmd: the unbiased estimate needs at least two points per sample");
}

std::vector<double> bandwidths_for(const std::vector<Eigen::VectorXd>& pooled, const MmdOptions& options) {
  double med = median_pairwise_distance(pooled);
  if (!(med > 0.0)) med = 1.0;
  std::vector<double> h;
  for (double f : options.bandwidth_factors) h.push_back(f * med);
  return h;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

nlohmann::json quartiles_json(const Quartiles& q) {
  return {{"min", q.min}, {"q1", q.q1}, {"median", q.median}, {"q3", q.q3}, {"max", q.max}, {"mean", q.mean}};
}

// JSON cannot carry infinities; they are written as null.
nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

Quartiles summarize(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "summarize: empty input");
  std::sort(values.begin(), values.end());
  auto at = [&](double p) {
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return frac == 0.0 ? values[lo] : values[lo] + frac * (values[hi] - values[lo]);
  };
  Quartiles q;
  q.min = values.front();
  q.max = values.back();
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  q.mean = mean_of(values);
  return q;
}

SolutionSampler model_sampler(const CvaeModel& model, const SampleOptions& options) {
  return [&model, options](const IkProblem& p, int count, std::uint64_t seed) {
    return sample_solutions(model, p, count, seed, options);
  };
}

IkReport evaluate(const SolutionSampler& sampler, const KinematicChain& chain, const std::vector<RigidTransform>& goals,
                  const EvalOptions& options) {
  if (options.samples_per_goal < 1) throw Error(ErrorCode::InvalidArgument, "evaluate: samples_per_goal must be >= 1");
  IkReport report;
  report.robot = chain.name();
  report.problems.resize(goals.size());
  parallel_for(static_cast<int>(goals.size()), options.workers, [&](int g) {
    const auto gi = static_cast<std::uint64_t>(g);
    ProblemReport& pr = report.problems[static_cast<std::size_t>(g)];
    pr.goal = goals[static_cast<std::size_t>(g)];
    const IkProblem problem(chain, pr.goal);
    const auto t0 = std::chrono::steady_clock::now();
    const auto samples = sampler(problem, options.samples_per_goal, splitmix64(options.seed ^ splitmix64(gi)));
    pr.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    pr.samples = static_cast<int>(samples.size());
    std::vector<double> pos, rot;
    for (const auto& s : samples) {
      if (s.status != ReconstructionStatus::Ok) {
        ++pr.diverged;
        continue;
      }
      const PoseError e = pose_error(end_effector_pose(chain, s.q), pr.goal);
      pos.push_back(e.position * 1000.0);
      rot.push_back(e.rotation);
      if (pos.back() < pr.best_pos_mm || (pos.back() == pr.best_pos_mm && rot.back() < pr.best_rot_deg)) {
        pr.best_pos_mm = pos.back();
        pr.best_rot_deg = rot.back();
      }
    }
    pr.pos_mm = pos.empty() ? infinite_quartiles() : summarize(pos);
    pr.rot_deg = rot.empty() ? infinite_quartiles() : summarize(rot);
    pr.success = pr.best_pos_mm < options.success.pos_mm && pr.best_rot_deg < options.success.rot_deg;

    if (options.mmd_samples > 1) {
      const auto ref = rejection_sample_reference(chain, pr.goal, options.mmd_pos_tol_m, options.mmd_rot_tol_deg,
                                                  options.mmd_reference_budget,
                                                  splitmix64(options.seed + 0x9e37 + gi),
                                                  static_cast<std::size_t>(options.mmd_samples));
      const auto draws = sampler(problem, options.mmd_samples, splitmix64(options.seed ^ splitmix64(gi + 0x5bd1e995)));
      std::vector<Configuration> ok;
      for (const auto& s : draws)
        if (s.status == ReconstructionStatus::Ok) ok.push_back(s.q);
      if (ref.samples.size() >= 2 && ok.size() >= 2) pr.mmd = mmd(ok, ref.samples);
    }
  });

  const double n = static_cast<double>(goals.size());
  if (goals.empty()) return report;
  std::vector<double> mmds;
  int successes = 0, diverged = 0, total = 0;
  double best_sum = 0.0, time_sum = 0.0;
  auto accumulate_q = [](Quartiles& acc, const Quartiles& q) {
    acc.min += q.min;
    acc.q1 += q.q1;
    acc.median += q.median;
    acc.q3 += q.q3;
    acc.max += q.max;
    acc.mean += q.mean;
  };
  auto divide_q = [](Quartiles& q, double d) {
    q.min /= d;
    q.q1 /= d;
    q.median /= d;
    q.q3 /= d;
    q.max /= d;
    q.mean /= d;
  };
  for (const auto& pr : report.problems) {
    accumulate_q(report.pos_mm, pr.pos_mm);
    accumulate_q(report.rot_deg, pr.rot_deg);
    best_sum += pr.best_pos_mm;
    time_sum += pr.time_ms;
    successes += pr.success ? 1 : 0;
    diverged += pr.diverged;
    total += pr.samples;
    if (std::isfinite(pr.mmd)) mmds.push_back(pr.mmd);
  }
  divide_q(report.pos_mm, n);
  divide_q(report.rot_deg, n);
  report.best_pos_mm_mean = best_sum / n;
  report.time_ms_mean = time_sum / n;
  report.success_pct = 100.0 * successes / n;
  report.divergence_pct = total == 0 ? 0.0 : 100.0 * diverged / total;
  if (!mmds.empty()) report.mmd_mean = mean_of(mmds);
  return report;
}

RejectionResult rejection_sample_reference(const KinematicChain& chain, const RigidTransform& goal, double pos_tol_m,
                                           double rot_tol_deg, std::uint64_t budget, std::uint64_t seed,
                                           std::size_t max_accept) {
  if (budget == 0) throw Error(ErrorCode::InvalidArgument, "rejection_sample_reference: budget must be > 0");
  if (!(pos_tol_m >= 0.0) || !(rot_tol_deg >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "rejection_sample_reference: tolerances must be >= 0");
  RejectionResult out;
  std::mt19937_64 rng(seed);
  while (out.draws < budget && out.samples.size() < max_accept) {
    Configuration q = sample_configuration(chain, rng);
    ++out.draws;
    const PoseError e = pose_error(end_effector_pose(chain, q), goal);
    if (e.position <= pos_tol_m && e.rotation <= rot_tol_deg) out.samples.push_back(std::move(q));
  }
  out.acceptance_rate = static_cast<double>(out.samples.size()) / static_cast<double>(out.draws);
  if (out.samples.empty()) {
    std::ostringstream os;
    os << "no configuration within " << pos_tol_m * 1000.0 << " mm / " << rot_tol_deg << " deg of the goal in "
       << out.draws << " draws";
    out.diagnostic = os.str();
  }
  return out;
}

double wrapped_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::DimensionMismatch, "wrapped_distance: vectors of length " + std::to_string(a.size()) +
                                                  " and " + std::to_string(b.size()));
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = wrap_angle(a[i] - b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

double median_pairwise_distance(const std::vector<Eigen::VectorXd>& points) {
  std::vector<double> d;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) d.push_back(wrapped_distance(points[i], points[j]));
  if (d.empty()) return 0.0;
  return summarize(std::move(d)).median;
}

double mmd2(const std::vector<Eigen::VectorXd>& X, const std::vector<Eigen::VectorXd>& Y,
            const std::vector<double>& bandwidths, bool biased) {
  check_mmd_inputs(X.size(), Y.size(), biased);
  std::vector<Eigen::VectorXd> Z = X;
  Z.insert(Z.end(), Y.begin(), Y.end());
  const Eigen::MatrixXd K = kernel_from_sq(pooled_sq_distances(Z), bandwidths);
  std::vector<int> xi(X.size()), yi(Y.size());
  std::iota(xi.begin(), xi.end(), 0);
  std::iota(yi.begin(), yi.end(), static_cast<int>(X.size()));
  return mmd2_from_gram(K, xi, yi, biased);
}

double mmd(const std::vector<Configuration>& X, const std::vector<Configuration>& Y, const MmdOptions& options) {
  const auto x = angle_vectors(X), y = angle_vectors(Y);
  std::vector<Eigen::VectorXd> pooled = x;
  pooled.insert(pooled.end(), y.begin(), y.end());
  check_mmd_inputs(x.size(), y.size(), options.biased);
  return mmd2(x, y, bandwidths_for(pooled, options), options.biased);
}

PermutationTest mmd_permutation_test(const std::vector<Configuration>& X, const std::vector<Configuration>& Y,
                                     int permutations, std::uint64_t seed, const MmdOptions& options) {
  if (permutations < 1) throw Error(ErrorCode::InvalidArgument, "mmd_permutation_test: permutations must be >= 1");
  check_mmd_inputs(X.size(), Y.size(), options.biased);
  std::vector<Eigen::VectorXd> Z = angle_vectors(X);
  const auto y = angle_vectors(Y);
  Z.insert(Z.end(), y.begin(), y.end());
  const Eigen::MatrixXd D2 = pooled_sq_distances(Z);
  // Median of the pooled distances, taken from the same matrix.
  std::vector<double> d;
  for (Eigen::Index i = 0; i < D2.rows(); ++i)
    for (Eigen::Index j = i + 1; j < D2.cols(); ++j) d.push_back(std::sqrt(D2(i, j)));
  double med = summarize(d).median;
  if (!(med > 0.0)) med = 1.0;
  std::vector<double> h;
  for (double f : options.bandwidth_factors) h.push_back(f * med);
  const Eigen::MatrixXd K = kernel_from_sq(D2, h);

  std::vector<int> idx(Z.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto m = static_cast<std::ptrdiff_t>(X.size());
  PermutationTest out;
  out.statistic = mmd2_from_gram(K, {idx.begin(), idx.begin() + m}, {idx.begin() + m, idx.end()}, options.biased);
  std::mt19937_64 rng(seed);
  int exceed = 0;
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const double v = mmd2_from_gram(K, {idx.begin(), idx.begin() + m}, {idx.begin() + m, idx.end()}, options.biased);
    out.null_samples.push_back(v);
    if (v >= out.statistic) ++exceed;
  }
  std::vector<double> sorted = out.null_samples;
  std::sort(sorted.begin(), sorted.end());
  const double pos = 0.95 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  out.p95 = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  const double mu = mean_of(out.null_samples);
  double var = 0.0;
  for (double v : out.null_samples) var += (v - mu) * (v - mu);
  out.null_std = out.null_samples.size() > 1 ? std::sqrt(var / static_cast<double>(out.null_samples.size() - 1)) : 0.0;
  out.p_value = (1.0 + exceed) / (1.0 + permutations);
  return out;
}

TimingRow time_sampling(const SolutionSampler& sampler, const IkProblem& problem, int count, int repeats,
                        std::uint64_t seed) {
  if (count < 1 || repeats < 1) throw Error(ErrorCode::InvalidArgument, "time_sampling: count and repeats must be >= 1");
  std::vector<double> ms;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = sampler(problem, count, seed + static_cast<std::uint64_t>(r));
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    if (static_cast<int>(out.size()) != count) throw Error(ErrorCode::State, "time_sampling: sampler returned a wrong count");
  }
  TimingRow row;
  row.count = count;
  row.mean_ms = mean_of(ms);
  double var = 0.0;
  for (double v : ms) var += (v - row.mean_ms) * (v - row.mean_ms);
  row.std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  row.per_sample_ms = row.mean_ms / count;
  return row;
}

std::vector<TimingRow> bench_sampling(const CvaeModel& model, const IkProblem& problem, const std::vector<int>& counts,
                                      int repeats, std::uint64_t seed) {
  const SolutionSampler sampler = model_sampler(model);
  std::vector<int> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  std::vector<TimingRow> rows;
  if (!sorted.empty()) (void)sampler(problem, std::min(sorted.front(), 8), seed ^ 0xabcdefULL);
  for (int c : sorted) rows.push_back(time_sampling(sampler, problem, c, repeats, seed));
  return rows;
}

RefineSummary refine_from_inits(const KinematicChain& chain, const std::vector<RigidTransform>& goals,
                                const std::function<std::vector<Configuration>(std::size_t problem)>& inits,
                                const std::string& label, const SuccessCriteria& success, const RefineOptions& options,
                                int workers) {
  RefineSummary s;
  s.init = label;
  s.problems = static_cast<int>(goals.size());
  if (goals.empty()) return s;
  std::vector<MultistartResult> results(goals.size());
  std::vector<double> times(goals.size());
  // Init generation stays serial so samplers need not be thread-safe.
  std::vector<std::vector<Configuration>> starts(goals.size());
  for (std::size_t g = 0; g < goals.size(); ++g) starts[g] = inits(g);
  parallel_for(static_cast<int>(goals.size()), workers, [&](int g) {
    const auto t0 = std::chrono::steady_clock::now();
    results[static_cast<std::size_t>(g)] =
        solve_multistart(chain, goals[static_cast<std::size_t>(g)], starts[static_cast<std::size_t>(g)], options);
    times[static_cast<std::size_t>(g)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  });
  double iters = 0.0, iters_best = 0.0, pos = 0.0, rot = 0.0;
  std::size_t runs = 0;
  int ok = 0;
  for (std::size_t g = 0; g < goals.size(); ++g) {
    for (const auto& r : results[g].results) iters += r.iterations;
    runs += results[g].results.size();
    const auto& best = results[g].best_result();
    iters_best += best.iterations;
    const PoseError e = pose_error(end_effector_pose(chain, best.q_final), goals[g]);
    pos += e.position * 1000.0;
    rot += e.rotation;
    if (e.position * 1000.0 < success.pos_mm && e.rotation < success.rot_deg) ++ok;
  }
  const double n = static_cast<double>(goals.size());
  s.iters_mean = iters / static_cast<double>(runs);
  s.iters_best_mean = iters_best / n;
  s.success_pct = 100.0 * ok / n;
  s.err_pos_mean_mm = pos / n;
  s.err_rot_mean_deg = rot / n;
  s.time_ms_mean = mean_of(times);
  return s;
}

RefineSummary refine_random_inits(const KinematicChain& chain, const std::vector<RigidTransform>& goals, int k,
                                  std::uint64_t seed, const SuccessCriteria& success, const RefineOptions& options,
                                  int workers) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "refine_random_inits: k must be >= 1");
  return refine_from_inits(
      chain, goals,
      [&](std::size_t g) {
        std::mt19937_64 rng(splitmix64(seed ^ splitmix64(g)));
        std::vector<Configuration> qs;
        for (int i = 0; i < k; ++i) qs.push_back(sample_configuration(chain, rng));
        return qs;
      },
      "random", success, options, workers);
}

RefineSummary refine_learned_inits(const CvaeModel& model, const KinematicChain& chain,
                                   const std::vector<RigidTransform>& goals, int k, std::uint64_t seed,
                                   const SuccessCriteria& success, const RefineOptions& options, int workers) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "refine_learned_inits: k must be >= 1");
  return refine_from_inits(
      chain, goals,
      [&](std::size_t g) {
        std::vector<Configuration> qs;
        for (auto& s : sample_solutions(model, IkProblem(chain, goals[g]), k, splitmix64(seed ^ splitmix64(g))))
          qs.push_back(project_to_limits(chain, s.q));
        return qs;
      },
      "learned", success, options, workers);
}

std::vector<RigidTransform> random_goals(const KinematicChain& chain, int count, std::uint64_t seed) {
  std::vector<RigidTransform> goals;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) goals.push_back(end_effector_pose(chain, sample_configuration(chain, rng)));
  return goals;
}

std::string ik_report_csv_header() {
  return "robot,problems,err_pos_mean_mm,err_pos_min_mm,err_pos_max_mm,err_pos_q1_mm,err_pos_q3_mm,"
         "err_rot_mean_deg,err_rot_min_deg,err_rot_max_deg,err_rot_q1_deg,err_rot_q3_deg,"
         "best_pos_mean_mm,success_pct,divergence_pct,mmd_mean,time_ms_mean";
}

std::string ik_report_csv_row(const IkReport& r) {
  std::ostringstream os;
  os << r.robot << ',' << r.problems.size() << ',' << fmt(r.pos_mm.mean) << ',' << fmt(r.pos_mm.min) << ','
     << fmt(r.pos_mm.max) << ',' << fmt(r.pos_mm.q1) << ',' << fmt(r.pos_mm.q3) << ',' << fmt(r.rot_deg.mean) << ','
     << fmt(r.rot_deg.min) << ',' << fmt(r.rot_deg.max) << ',' << fmt(r.rot_deg.q1) << ',' << fmt(r.rot_deg.q3) << ','
     << fmt(r.best_pos_mm_mean) << ',' << fmt(r.success_pct) << ',' << fmt(r.divergence_pct) << ','
     << fmt(r.mmd_mean) << ',' << fmt(r.time_ms_mean);
  return os.str();
}

nlohmann::json ik_report_json(const IkReport& r) {
  nlohmann::json j;
  j["robot"] = r.robot;
  j["problems"] = r.problems.size();
  j["err_pos_mean_mm"] = num(r.pos_mm.mean);
  j["err_pos_min_mm"] = num(r.pos_mm.min);
  j["err_pos_max_mm"] = num(r.pos_mm.max);
  j["err_pos_q1_mm"] = num(r.pos_mm.q1);
  j["err_pos_q3_mm"] = num(r.pos_mm.q3);
  j["err_rot_mean_deg"] = num(r.rot_deg.mean);
  j["err_rot_min_deg"] = num(r.rot_deg.min);
  j["err_rot_max_deg"] = num(r.rot_deg.max);
  j["err_rot_q1_deg"] = num(r.rot_deg.q1);
  j["err_rot_q3_deg"] = num(r.rot_deg.q3);
  j["best_pos_mean_mm"] = num(r.best_pos_mm_mean);
  j["success_pct"] = r.success_pct;
  j["divergence_pct"] = r.divergence_pct;
  j["mmd_mean"] = num(r.mmd_mean);
  j["time_ms_mean"] = r.time_ms_mean;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& p : r.problems) {
    per.push_back({{"pos_mm", quartiles_json(p.pos_mm)},
                   {"rot_deg", quartiles_json(p.rot_deg)},
                   {"best_pos_mm", num(p.best_pos_mm)},
                   {"best_rot_deg", num(p.best_rot_deg)},
                   {"success", p.success},
                   {"diverged", p.diverged},
                   {"samples", p.samples},
                   {"mmd", num(p.mmd)},
                   {"time_ms", p.time_ms}});
  }
  // quartiles_json may hold infinities for all-diverged problems.
  for (auto& p : per)
    for (const char* key : {"pos_mm", "rot_deg"})
      for (auto& [k, v] : p[key].items())
        if (v.is_number_float() && !std::isfinite(v.get<double>())) v = nullptr;
  j["per_problem"] = per;
  return j;
}

std::string refine_csv_header() {
  return "init,problems,iters_mean,iters_best_mean,success_pct,err_pos_mean_mm,err_rot_mean_deg,time_ms_mean";
}

std::string refine_csv_row(const RefineSummary& s) {
  std::ostringstream os;
  os << s.init << ',' << s.problems << ',' << fmt(s.iters_mean) << ',' << fmt(s.iters_best_mean) << ','
     << fmt(s.success_pct) << ',' << fmt(s.err_pos_mean_mm) << ',' << fmt(s.err_rot_mean_deg) << ','
     << fmt(s.time_ms_mean);
  return os.str();
}

nlohmann::json refine_json(const RefineSummary& s) {
  return {{"init", s.init},
          {"problems", s.problems},
          {"iters_mean", s.iters_mean},
          {"iters_best_mean", s.iters_best_mean},
          {"success_pct", s.success_pct},
          {"err_pos_mean_mm", s.err_pos_mean_mm},
          {"err_rot_mean_deg", s.err_rot_mean_deg},
          {"time_ms_mean", s.time_ms_mean}};
}

std::string timing_csv(const std::vector<TimingRow>& rows) {
  std::ostringstream os;
  os << "count,time_ms_mean,time_ms_std,per_sample_ms\n";
  for (const auto& r : rows)
    os << r.count << ',' << fmt(r.mean_ms) << ',' << fmt(r.std_ms) << ',' << fmt(r.per_sample_ms) << '\n';
  return os.str();
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  try {
    if (j.contains("arch")) c.arch = architecture_from_string(j.at("arch").get<std::string>());
    if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim").get<int>();
    if (j.contains("hidden_dim")) c.hidden_dim = j.at("hidden_dim").get<int>();
    if (j.contains("layers")) c.layers = j.at("layers").get<int>();
    if (j.contains("components")) c.components = j.at("components").get<int>();
    if (j.contains("coord_eps")) c.coord_eps = j.at("coord_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("plateau_patience")) c.plateau_patience = j.at("plateau_patience").get<int>();
    if (j.contains("plateau_threshold")) c.plateau_threshold = j.at("plateau_threshold").get<double>();
    if (j.contains("loss_smoothing")) c.loss_smoothing = j.at("loss_smoothing").get<double>();
    if (j.contains("kl_weight")) c.kl_weight = j.at("kl_weight").get<double>();
    if (j.contains("kl_samples")) c.kl_samples = j.at("kl_samples").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("time_budget_s")) c.time_budget_s = j.at("time_budget_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentSpec experiment_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  try {
    s.kind = j.at("kind").get<std::string>();
    s.robots = j.at("robots").get<std::vector<std::string>>();
    s.test_robots = j.value("test_robots", s.robots);
    s.samples_per_robot = j.value("samples_per_robot", s.samples_per_robot);
    s.test_problems = j.value("test_problems", s.test_problems);
    s.samples_per_goal = j.value("samples_per_goal", s.samples_per_goal);
    s.seed = j.value("seed", s.seed);
    if (j.contains("randomize")) {
      const auto r = j.at("randomize").get<std::vector<double>>();
      if (r.size() != 2) throw Error(ErrorCode::Parse, "experiment: randomize must be [lo, hi]");
      s.scale_lo = r[0];
      s.scale_hi = r[1];
    }
    s.instances = j.value("instances", s.instances);
    s.output_dir = j.value("output_dir", s.output_dir);
    s.workers = j.value("workers", s.workers);
    if (j.contains("model")) s.model = model_config_from_json(j.at("model"), s.model);
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"), s.train);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("experiment: ") + e.what());
  }
  static const std::vector<std::string> kinds{"multi_robot", "init_comparison", "ablation", "generalization"};
  if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end())
    throw Error(ErrorCode::Parse, "experiment: unknown kind '" + s.kind + "'");
  if (s.robots.empty()) throw Error(ErrorCode::Parse, "experiment: robots must be nonempty");
  return s;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  namespace fs = std::filesystem;
  ExperimentResult result;
  auto load_all = [](const std::vector<std::string>& paths) {
    std::vector<KinematicChain> chains;
    for (const auto& p : paths) {
      if (!fs::exists(p)) throw Error(ErrorCode::Io, "robot file '" + p + "' does not exist");
      chains.push_back(load_chain(p));
    }
    return chains;
  };
  const auto templates = load_all(spec.robots);
  const auto test_chains = load_all(spec.test_robots.empty() ? spec.robots : spec.test_robots);
  fs::create_directories(spec.output_dir);

  std::vector<KinematicChain> train_chains = templates;
  if (spec.kind == "generalization") {
    train_chains.clear();
    for (std::size_t t = 0; t < templates.size(); ++t)
      for (int i = 0; i < spec.instances; ++i)
        train_chains.push_back(random_chain(templates[t], {spec.scale_lo, spec.scale_hi},
                                            splitmix64(spec.seed ^ splitmix64(t * 100003 + static_cast<std::size_t>(i)))));
  }
  // Per-chain counts keep the total near samples_per_robot × templates.
  const int per_chain = spec.kind == "generalization"
                            ? std::max(1, spec.samples_per_robot / std::max(1, spec.instances))
                            : spec.samples_per_robot;
  const Dataset data = generate_dataset(train_chains, per_chain, spec.seed, spec.workers);

  auto obtain_model = [&](const ModelConfig& cfg) {
    const std::string path =
        (fs::path(spec.output_dir) / (spec.kind + "_" + to_string(cfg.arch) + ".ckpt")).string();
    if (fs::exists(path)) {
      CheckpointMeta meta;
      CvaeModel loaded = load_checkpoint(path, &meta);
      if (meta.dataset_hash == data.hash() && meta.seed == spec.train.seed) return loaded;
    }
    CvaeModel model(cfg, spec.seed);
    TrainConfig tc = spec.train;
    tc.workers = spec.workers;
    tc.checkpoint_path = path;
    train(model, data, tc);
    if (tc.epochs == 0) save_checkpoint(path, model, {tc.seed, data.hash(), 0});
    result.artifacts.push_back(path);
    return model;
  };

  EvalOptions eo;
  eo.samples_per_goal = spec.samples_per_goal;
  eo.seed = spec.seed + 1;
  eo.workers = spec.workers;

  auto write = [&](const std::string& name, const std::string& text) {
    const auto path = (fs::path(spec.output_dir) / name).string();
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
    out << text;
    result.artifacts.push_back(path);
  };

  auto eval_all = [&](const CvaeModel& model, const std::string& tag) {
    for (std::size_t c = 0; c < test_chains.size(); ++c) {
      const auto goals = random_goals(test_chains[c], spec.test_problems, splitmix64(spec.seed + 77 + c));
      IkReport r = evaluate(model_sampler(model), test_chains[c], goals, eo);
      if (!tag.empty()) r.robot += "[" + tag + "]";
      result.reports.push_back(std::move(r));
    }
  };

  if (spec.kind == "ablation") {
    ModelConfig eg = spec.model, mp = spec.model;
    eg.arch = Architecture::Egnn;
    mp.arch = Architecture::Mpnn;
    const Dataset test = generate_dataset(templates, std::max(1, spec.test_problems), splitmix64(spec.seed + 991));
    for (const auto& cfg : {eg, mp}) {
      const CvaeModel model = obtain_model(cfg);
      result.test_elbo.emplace_back(to_string(cfg.arch), evaluate_elbo(model, test.records, spec.seed + 5).elbo);
      eval_all(model, to_string(cfg.arch));
    }
  } else {
    const CvaeModel model = obtain_model(spec.model);
    if (spec.kind == "init_comparison") {
      for (std::size_t c = 0; c < test_chains.size(); ++c) {
        const auto goals = random_goals(test_chains[c], spec.test_problems, splitmix64(spec.seed + 77 + c));
        auto rnd = refine_random_inits(test_chains[c], goals, spec.samples_per_goal, spec.seed + 3, {}, {}, spec.workers);
        auto lrn = refine_learned_inits(model, test_chains[c], goals, spec.samples_per_goal, spec.seed + 4, {}, {},
                                        spec.workers);
        rnd.init = test_chains[c].name() + ":" + rnd.init;
        lrn.init = test_chains[c].name() + ":" + lrn.init;
        result.refine.push_back(rnd);
        result.refine.push_back(lrn);
      }
    } else {
      eval_all(model, "");
    }
  }

  nlohmann::json j;
  j["kind"] = spec.kind;
  j["dataset_hash"] = data.hash();
  if (!result.reports.empty()) {
    std::string csv = ik_report_csv_header() + "\n";
    j["reports"] = nlohmann::json::array();
    for (const auto& r : result.reports) {
      csv += ik_report_csv_row(r) + "\n";
      j["reports"].push_back(ik_report_json(r));
    }
    write(spec.kind + "_report.csv", csv);
  }
  if (!result.refine.empty()) {
    std::string csv = refine_csv_header() + "\n";
    j["refine"] = nlohmann::json::array();
    for (const auto& r : result.refine) {
      csv += refine_csv_row(r) + "\n";
      j["refine"].push_back(refine_json(r));
    }
    write(spec.kind + "_refine.csv", csv);
  }
  if (!result.test_elbo.empty()) {
    std::string csv = "arch,test_elbo\n";
    for (const auto& [arch, v] : result.test_elbo) {
      csv += arch + "," + fmt(v) + "\n";
      j["test_elbo"][arch] = v;
    }
    write(spec.kind + "_elbo.csv", csv);
  }
  write(spec.kind + "_report.json", j.dump(2) + "\n");
  return result;
}

}  // namespace dgik
