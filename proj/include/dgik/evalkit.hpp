#pragma once

// Error statistics, success rates, MMD against rejection-sampled references,
// timing curves and experiment orchestration.

#include "dgik/localsolve.hpp"
#include "dgik/model.hpp"
#include "dgik/robot_io.hpp"
#include "dgik/training.hpp"

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace dgik {

/// Order statistics with linear interpolation between closest ranks.
struct Quartiles {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0, mean = 0.0;
};
/// Throws InvalidArgument on an empty input.
Quartiles summarize(std::vector<double> values);

struct SuccessCriteria {
  double pos_mm = 10.0;
  double rot_deg = 1.0;
};

struct ProblemReport {
  RigidTransform goal;
  int samples = 0;
  int diverged = 0;
  /// Statistics over the non-diverged samples; all infinite when none remain.
  Quartiles pos_mm, rot_deg;
  /// Minimum-error sample (lexicographic on position, then rotation).
  double best_pos_mm = std::numeric_limits<double>::infinity();
  double best_rot_deg = std::numeric_limits<double>::infinity();
  bool success = false;
  double mmd = std::numeric_limits<double>::quiet_NaN();
  double time_ms = 0.0;
};

/// Problem statistics averaged over problems.
struct IkReport {
  std::string robot;
  std::vector<ProblemReport> problems;
  Quartiles pos_mm, rot_deg;  ///< each field is a mean of the per-problem field
  double best_pos_mm_mean = 0.0;
  double success_pct = 0.0;
  double divergence_pct = 0.0;
  double mmd_mean = std::numeric_limits<double>::quiet_NaN();
  double time_ms_mean = 0.0;
};

/// Produces `count` candidate solutions for a problem; `seed` fixes the draw.
using SolutionSampler = std::function<std::vector<SampleResult>(const IkProblem&, int count, std::uint64_t seed)>;

SolutionSampler model_sampler(const CvaeModel& model, const SampleOptions& options = {});

struct EvalOptions {
  int samples_per_goal = 32;
  SuccessCriteria success;
  std::uint64_t seed = 0;
  int workers = 1;
  /// MMD against a rejection-sampled reference; disabled when 0.
  int mmd_samples = 0;
  std::uint64_t mmd_reference_budget = 200000;
  double mmd_pos_tol_m = 0.08;
  double mmd_rot_tol_deg = 8.0;
};

IkReport evaluate(const SolutionSampler& sampler, const KinematicChain& chain, const std::vector<RigidTransform>& goals,
                  const EvalOptions& options = {});

struct RejectionResult {
  std::vector<Configuration> samples;
  std::uint64_t draws = 0;
  double acceptance_rate = 0.0;
  std::string diagnostic;  ///< set when nothing was accepted
};

/// Uniform draws kept when their FK pose lies within the tolerances of the
/// goal. Stops after `max_accept` acceptances or `budget` draws.
RejectionResult rejection_sample_reference(const KinematicChain& chain, const RigidTransform& goal, double pos_tol_m,
                                           double rot_tol_deg, std::uint64_t budget, std::uint64_t seed,
                                           std::size_t max_accept = std::numeric_limits<std::size_t>::max());

/// Euclidean norm of the per-joint wrapped angle differences.
double wrapped_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Median of all pairwise wrapped distances in the pooled set.
double median_pairwise_distance(const std::vector<Eigen::VectorXd>& points);

/// MMD² with a sum of RBF kernels exp(−d²/(2h²)) over `bandwidths`. The
/// unbiased form excludes diagonal terms within each sample.
double mmd2(const std::vector<Eigen::VectorXd>& X, const std::vector<Eigen::VectorXd>& Y,
            const std::vector<double>& bandwidths, bool biased = false);

struct MmdOptions {
  std::vector<double> bandwidth_factors{0.5, 1.0, 2.0};
  bool biased = false;
};

/// Bandwidths are the pooled median pairwise distance times each factor.
double mmd(const std::vector<Configuration>& X, const std::vector<Configuration>& Y, const MmdOptions& options = {});

struct PermutationTest {
  double statistic = 0.0;
  std::vector<double> null_samples;
  double p95 = 0.0;
  double null_std = 0.0;
  double p_value = 1.0;
};

/// Permutes the pooled set `permutations` times with bandwidths fixed from
/// the pooled data.
PermutationTest mmd_permutation_test(const std::vector<Configuration>& X, const std::vector<Configuration>& Y,
                                     int permutations, std::uint64_t seed, const MmdOptions& options = {});

struct TimingRow {
  int count = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double per_sample_ms = 0.0;
};

TimingRow time_sampling(const SolutionSampler& sampler, const IkProblem& problem, int count, int repeats,
                        std::uint64_t seed);
/// One row per count; a warm-up call precedes the timed repeats.
std::vector<TimingRow> bench_sampling(const CvaeModel& model, const IkProblem& problem,
                                      const std::vector<int>& counts = {1, 10, 100, 1000}, int repeats = 5,
                                      std::uint64_t seed = 0);

/// Paired local-solver comparison for one init source.
struct RefineSummary {
  std::string init;
  int problems = 0;
  double iters_mean = 0.0;       ///< over every refine run (all starts, all problems)
  double iters_best_mean = 0.0;  ///< iterations of the selected start, over problems
  double success_pct = 0.0;
  double err_pos_mean_mm = 0.0;
  double err_rot_mean_deg = 0.0;
  double time_ms_mean = 0.0;  ///< total multistart time per problem
};

RefineSummary refine_from_inits(const KinematicChain& chain, const std::vector<RigidTransform>& goals,
                                const std::function<std::vector<Configuration>(std::size_t problem)>& inits,
                                const std::string& label, const SuccessCriteria& success = {},
                                const RefineOptions& options = {}, int workers = 1);

/// `k` uniform configurations per problem.
RefineSummary refine_random_inits(const KinematicChain& chain, const std::vector<RigidTransform>& goals, int k,
                                  std::uint64_t seed, const SuccessCriteria& success = {},
                                  const RefineOptions& options = {}, int workers = 1);
/// `k` model samples per problem; diverged samples start from their nearest
/// reconstruction as returned by the sampler.
RefineSummary refine_learned_inits(const CvaeModel& model, const KinematicChain& chain,
                                   const std::vector<RigidTransform>& goals, int k, std::uint64_t seed,
                                   const SuccessCriteria& success = {}, const RefineOptions& options = {},
                                   int workers = 1);

/// Reachable goals: FK of uniform configurations.
std::vector<RigidTransform> random_goals(const KinematicChain& chain, int count, std::uint64_t seed);

// Report serialization with stable column names.
std::string ik_report_csv_header();
std::string ik_report_csv_row(const IkReport& report);
nlohmann::json ik_report_json(const IkReport& report);
std::string refine_csv_header();
std::string refine_csv_row(const RefineSummary& s);
nlohmann::json refine_json(const RefineSummary& s);
std::string timing_csv(const std::vector<TimingRow>& rows);

/// Experiment description, read from JSON:
///   kind: "multi_robot" | "init_comparison" | "ablation" | "generalization"
///   robots: robot files to train on (templates for "generalization")
///   test_robots: evaluation robots (defaults to `robots`)
///   samples_per_robot, test_problems, samples_per_goal, seed
///   randomize: [lo, hi] link scale range and instances (generalization)
///   model: ModelConfig fields; train: TrainConfig fields
///   output_dir: where checkpoints and reports go
struct ExperimentSpec {
  std::string kind;
  std::vector<std::string> robots;
  std::vector<std::string> test_robots;
  int samples_per_robot = 1000;
  int test_problems = 50;
  int samples_per_goal = 32;
  std::uint64_t seed = 0;
  double scale_lo = 0.6, scale_hi = 1.4;
  int instances = 10;
  ModelConfig model;
  TrainConfig train;
  std::string output_dir = ".";
  int workers = 1;
};

ExperimentSpec experiment_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct ExperimentResult {
  std::vector<IkReport> reports;
  std::vector<RefineSummary> refine;
  /// Ablation only: test ELBO per architecture, in (egnn, mpnn) order.
  std::vector<std::pair<std::string, double>> test_elbo;
  std::vector<std::string> artifacts;  ///< files written
};

/// Trains (or loads, when a checkpoint for the spec already exists), then
/// evaluates and writes CSV/JSON under output_dir.
ExperimentResult run_experiment(const ExperimentSpec& spec);

}  // namespace dgik
