// dgik command-line interface. Exit codes: 0 success, 2 bad input,
// 3 runtime failure.

#include "dgik/error.hpp"
#include "dgik/evalkit.hpp"
#include "dgik/robot_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace dgik;

namespace {

constexpr int kBadInput = 2;
constexpr int kRuntimeFailure = 3;

int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

/// Accepts a path or the name of a bundled robot ("toy6").
std::string resolve_robot(const std::string& arg) {
  if (fs::exists(arg)) return arg;
  const fs::path bundled = fs::path(DGIK_ROBOTS_DIR) / (arg + ".json");
  if (fs::exists(bundled)) return bundled.string();
  throw Error(ErrorCode::Io, "robot file '" + arg + "' does not exist");
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw Error(ErrorCode::Io, what + " '" + path + "' does not exist");
}

void require_output(const std::string& path) {
  if (path.empty()) return;
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) throw Error(ErrorCode::Io, "output directory '" + parent.string() + "' does not exist");
}

RigidTransform parse_goal(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size() && item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "goal: '" + item + "' is not a number");
    }
  }
  if (v.size() != 7) throw Error(ErrorCode::InvalidArgument, "goal: expected x,y,z,qw,qx,qy,qz (7 values), got " +
                                                                 std::to_string(v.size()));
  Eigen::Quaterniond q(v[3], v[4], v[5], v[6]);
  if (std::abs(q.norm() - 1.0) > 1e-3)
    throw Error(ErrorCode::InvalidArgument, "goal: quaternion norm " + std::to_string(q.norm()) + " deviates from 1");
  return RigidTransform::from_quaternion(Eigen::Vector3d(v[0], v[1], v[2]), q.normalized());
}

std::vector<RigidTransform> read_goals(const std::vector<std::string>& goals, const std::string& goal_file) {
  std::vector<RigidTransform> out;
  for (const auto& g : goals) out.push_back(parse_goal(g));
  if (!goal_file.empty()) {
    require_file(goal_file, "goal file");
    std::ifstream in(goal_file);
    nlohmann::json j;
    try {
      in >> j;
      for (const auto& g : j) {
        std::ostringstream os;
        const auto v = g.get<std::vector<double>>();
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << std::setprecision(17) << v[i];
        out.push_back(parse_goal(os.str()));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, "goal file '" + goal_file + "': " + e.what());
    }
  }
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "no goal given (use --goal or --goal-file)");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
  out << text;
}

bool wants_csv(const std::string& path) { return fs::path(path).extension() == ".csv"; }

nlohmann::json angles_json(const Configuration& q) {
  return std::vector<double>(q.angles.data(), q.angles.data() + q.angles.size());
}

// ---------------------------------------------------------------- gen
struct GenArgs {
  std::vector<std::string> robots;
  int samples = 1000;
  std::string out;
  std::uint64_t seed = 0;
  double randomize = 0.0;
  int instances = 1;
  int workers = default_workers();
};

int cmd_gen(const GenArgs& a) {
  std::vector<KinematicChain> chains;
  std::vector<std::string> paths;
  for (const auto& r : a.robots) paths.push_back(resolve_robot(r));
  require_output(a.out);
  if (a.samples < 0) throw Error(ErrorCode::InvalidArgument, "--samples must be >= 0");
  if (a.randomize < 0.0 || a.randomize >= 1.0) throw Error(ErrorCode::InvalidArgument, "--randomize must be in [0, 1)");
  if (a.instances < 1) throw Error(ErrorCode::InvalidArgument, "--instances must be >= 1");
  for (const auto& p : paths) {
    const KinematicChain templ = load_chain(p);
    if (a.randomize > 0.0) {
      for (int i = 0; i < a.instances; ++i) {
        const KinematicChain c = random_chain(templ, {1.0 - a.randomize, 1.0 + a.randomize},
                                              splitmix64(a.seed ^ splitmix64(chains.size() + 1)));
        chains.emplace_back(templ.name() + "_r" + std::to_string(i), c.joints(), c.tool());
      }
    } else {
      chains.push_back(templ);
    }
  }
  const Dataset ds = generate_dataset(chains, a.samples, a.seed, a.workers);
  save_dataset(a.out, ds);
  const auto counts = ds.counts_per_robot();
  for (std::size_t i = 0; i < chains.size(); ++i) std::cout << chains[i].name() << ": " << counts[i] << " records\n";
  std::cout << "total: " << ds.records.size() << " records\nhash: " << ds.hash() << "\nwritten: " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- train
struct TrainArgs {
  std::string dataset, out, config;
  std::uint64_t seed = 0;
  std::optional<std::string> arch;
  std::optional<int> epochs, batch_size, hidden, latent, layers, components, kl_samples;
  std::optional<double> lr, kl_weight, time_budget, coord_eps;
  int workers = default_workers();
};

int cmd_train(const TrainArgs& a) {
  require_file(a.dataset, "dataset");
  require_output(a.out);
  ModelConfig mc;
  TrainConfig tc;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    std::ifstream in(a.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, "config '" + a.config + "': " + e.what());
    }
    if (j.contains("model")) mc = model_config_from_json(j.at("model"), mc);
    if (j.contains("train")) tc = train_config_from_json(j.at("train"), tc);
  }
  if (a.arch) mc.arch = architecture_from_string(*a.arch);
  if (a.hidden) mc.hidden_dim = *a.hidden;
  if (a.latent) mc.latent_dim = *a.latent;
  if (a.layers) mc.layers = *a.layers;
  if (a.components) mc.components = *a.components;
  if (a.coord_eps) mc.coord_eps = *a.coord_eps;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.kl_weight) tc.kl_weight = *a.kl_weight;
  if (a.kl_samples) tc.kl_samples = *a.kl_samples;
  if (a.time_budget) tc.time_budget_s = *a.time_budget;
  tc.seed = a.seed;
  tc.workers = a.workers;
  tc.checkpoint_path = a.out;
  mc.validate();
  tc.validate();

  const Dataset ds = load_dataset(a.dataset);
  std::cout << "dataset " << a.dataset << ": " << ds.records.size() << " records, hash " << ds.hash() << "\n";
  CvaeModel model(mc, a.seed);
  const auto res = train(model, ds, tc, [](const EpochStats& s) {
    std::cout << "epoch " << s.epoch << " loss " << s.loss << " recon " << s.recon << " kl " << s.kl << " lr "
              << s.learning_rate << " (" << s.seconds << " s)" << std::endl;
  });
  if (res.epochs_completed == 0 && !res.diverged) save_checkpoint(a.out, model, {a.seed, ds.hash(), 0});
  if (res.diverged) {
    std::cerr << "training diverged: " << res.divergence_message << "\n";
    if (res.epochs_completed > 0) std::cerr << "checkpoint of epoch " << res.epochs_completed << " kept at " << a.out << "\n";
    return kRuntimeFailure;
  }
  std::cout << "checkpoint: " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- sample
struct SampleArgs {
  std::string checkpoint, robot, goal_file, out;
  std::vector<std::string> goals;
  int count = 32;
  std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const KinematicChain chain = load_chain(resolve_robot(a.robot));
  const auto goals = read_goals(a.goals, a.goal_file);
  require_output(a.out);
  if (a.count < 0) throw Error(ErrorCode::InvalidArgument, "--count must be >= 0");
  const CvaeModel model = load_checkpoint(a.checkpoint);
  nlohmann::json problems = nlohmann::json::array();
  for (std::size_t g = 0; g < goals.size(); ++g) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& s : sample_solutions(model, IkProblem(chain, goals[g]), a.count, splitmix64(a.seed ^ splitmix64(g)))) {
      const PoseError e = pose_error(end_effector_pose(chain, s.q), goals[g]);
      entries.push_back({{"angles", angles_json(s.q)},
                         {"pos_err_mm", e.position * 1000.0},
                         {"rot_err_deg", e.rotation},
                         {"status", s.status == ReconstructionStatus::Ok ? "ok" : "diverged"}});
    }
    problems.push_back(std::move(entries));
  }
  // A single goal prints a flat list of entries.
  const nlohmann::json out = goals.size() == 1 ? problems[0] : problems;
  write_text(a.out, out.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------- refine
struct RefineArgs {
  std::string robot, goal_file, init = "random:32", checkpoint, out;
  std::vector<std::string> goals;
  std::uint64_t seed = 0;
  int max_iterations = 100;
  int workers = default_workers();
};

int cmd_refine(const RefineArgs& a) {
  const KinematicChain chain = load_chain(resolve_robot(a.robot));
  const auto goals = read_goals(a.goals, a.goal_file);
  require_output(a.out);
  const auto colon = a.init.find(':');
  const std::string kind = a.init.substr(0, colon);
  int k = 0;
  try {
    k = colon == std::string::npos ? 0 : std::stoi(a.init.substr(colon + 1));
  } catch (const std::exception&) {
    k = 0;
  }
  if ((kind != "random" && kind != "checkpoint") || k < 1)
    throw Error(ErrorCode::InvalidArgument, "--init must be random:K or checkpoint:K with K >= 1");
  std::optional<CvaeModel> model;
  if (kind == "checkpoint") {
    if (a.checkpoint.empty()) throw Error(ErrorCode::InvalidArgument, "--init checkpoint:K requires --checkpoint");
    require_file(a.checkpoint, "checkpoint");
    model.emplace(load_checkpoint(a.checkpoint));
  }
  RefineOptions ro;
  ro.max_iterations = a.max_iterations;

  std::ostringstream csv;
  csv << "goal,init,k,iters_mean,iters_best,converged,pos_err_mm,rot_err_deg,time_ms\n";
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t g = 0; g < goals.size(); ++g) {
    std::vector<Configuration> inits;
    const std::uint64_t seed = splitmix64(a.seed ^ splitmix64(g));
    if (model) {
      for (const auto& s : sample_solutions(*model, IkProblem(chain, goals[g]), k, seed))
        inits.push_back(project_to_limits(chain, s.q));
    } else {
      std::mt19937_64 rng(seed);
      for (int i = 0; i < k; ++i) inits.push_back(sample_configuration(chain, rng));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const MultistartResult m = solve_multistart(chain, goals[g], inits, ro, a.workers);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const RefineResult& best = m.best_result();
    double iters = 0.0;
    for (const auto& r : m.results) iters += r.iterations;
    iters /= static_cast<double>(m.results.size());
    const PoseError e = pose_error(end_effector_pose(chain, best.q_final), goals[g]);
    csv << g << ',' << kind << ',' << k << ',' << iters << ',' << best.iterations << ',' << (best.converged ? 1 : 0)
        << ',' << e.position * 1000.0 << ',' << e.rotation << ',' << ms << '\n';
    rows.push_back({{"goal", g},
                    {"init", kind},
                    {"k", k},
                    {"iters_mean", iters},
                    {"iters_best", best.iterations},
                    {"converged", best.converged},
                    {"pos_err_mm", e.position * 1000.0},
                    {"rot_err_deg", e.rotation},
                    {"time_ms", ms},
                    {"angles", angles_json(best.q_final)}});
  }
  write_text(a.out, wants_csv(a.out) ? csv.str() : rows.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------- eval
struct EvalArgs {
  std::string checkpoint, out;
  std::vector<std::string> robots;
  int problems = 200;
  int samples_per_goal = 32;
  int mmd_samples = 0;
  std::uint64_t seed = 0;
  int workers = default_workers();
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  std::vector<KinematicChain> chains;
  for (const auto& r : a.robots) chains.push_back(load_chain(resolve_robot(r)));
  require_output(a.out);
  if (a.problems < 1 || a.samples_per_goal < 1)
    throw Error(ErrorCode::InvalidArgument, "--problems and --samples-per-goal must be >= 1");
  const CvaeModel model = load_checkpoint(a.checkpoint);
  EvalOptions eo;
  eo.samples_per_goal = a.samples_per_goal;
  eo.mmd_samples = a.mmd_samples;
  eo.seed = a.seed;
  eo.workers = a.workers;
  std::string csv = ik_report_csv_header() + "\n";
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t c = 0; c < chains.size(); ++c) {
    const auto goals = random_goals(chains[c], a.problems, splitmix64(a.seed + 1 + c));
    const IkReport r = evaluate(model_sampler(model), chains[c], goals, eo);
    csv += ik_report_csv_row(r) + "\n";
    j.push_back(ik_report_json(r));
    std::cerr << r.robot << ": success " << r.success_pct << " %, best pos " << r.best_pos_mm_mean << " mm, divergence "
              << r.divergence_pct << " %\n";
  }
  write_text(a.out, wants_csv(a.out) ? csv : j.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------- bench
struct BenchArgs {
  std::string checkpoint, robot, out;
  std::vector<int> counts{1, 10, 100, 1000};
  int repeats = 5;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const KinematicChain chain = load_chain(resolve_robot(a.robot));
  require_output(a.out);
  for (int c : a.counts)
    if (c < 1) throw Error(ErrorCode::InvalidArgument, "--counts must all be >= 1");
  if (a.repeats < 1) throw Error(ErrorCode::InvalidArgument, "--repeats must be >= 1");
  const CvaeModel model = load_checkpoint(a.checkpoint);
  const IkProblem problem(chain, random_goals(chain, 1, a.seed).front());
  write_text(a.out, timing_csv(bench_sampling(model, problem, a.counts, a.repeats, a.seed)));
  return 0;
}

// ---------------------------------------------------------------- experiment
int cmd_experiment(const std::string& spec_path) {
  require_file(spec_path, "experiment spec");
  std::ifstream in(spec_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, "experiment spec '" + spec_path + "': " + e.what());
  }
  const auto res = run_experiment(experiment_from_json(j));
  for (const auto& a : res.artifacts) std::cout << "wrote " << a << "\n";
  return 0;
}

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::Parse:
    case ErrorCode::Io:
      return kBadInput;
    default:
      return kRuntimeFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dgik: distance-geometric inverse kinematics with a graph CVAE (interface version 1)"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dgik 1.0.0");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Sample configurations and write a dataset of complete/partial graphs");
  g->add_option("--robot", gen.robots, "Robot JSON file or bundled robot name (repeatable)")->required();
  g->add_option("--samples", gen.samples, "Records per robot (per randomized instance with --randomize)");
  g->add_option("--out", gen.out, "Output dataset file")->required();
  g->add_option("--seed", gen.seed, "Random seed")->required();
  g->add_option("--randomize", gen.randomize, "Scale every link length by a factor in [1-F, 1+F] (e.g. 0.4)");
  g->add_option("--instances", gen.instances, "Randomized variants per robot template (with --randomize)");
  g->add_option("--workers", gen.workers, "Worker threads");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a dataset and write a checkpoint");
  t->add_option("--dataset", tr.dataset, "Dataset file from 'gen'")->required();
  t->add_option("--out", tr.out, "Checkpoint path (rewritten after every epoch)")->required();
  t->add_option("--seed", tr.seed, "Seed for initialization, shuffling and noise")->required();
  t->add_option("--config", tr.config, "JSON file with optional 'model' and 'train' objects");
  t->add_option("--arch", tr.arch, "egnn or mpnn");
  t->add_option("--epochs", tr.epochs, "Training epochs");
  t->add_option("--batch-size", tr.batch_size, "Records per optimizer step");
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--kl-weight", tr.kl_weight, "Weight of the KL term in the training loss");
  t->add_option("--kl-samples", tr.kl_samples, "Monte Carlo samples for the KL term");
  t->add_option("--hidden", tr.hidden, "Hidden width");
  t->add_option("--latent", tr.latent, "Latent dimension per node");
  t->add_option("--layers", tr.layers, "Message-passing layers per network");
  t->add_option("--components", tr.components, "Prior mixture components");
  t->add_option("--coord-eps", tr.coord_eps, "Coordinate-update normalization epsilon");
  t->add_option("--time-budget", tr.time_budget, "Stop after this many seconds (0 = no limit)");
  t->add_option("--workers", tr.workers, "Worker threads");

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Draw IK solutions for goal poses from a trained model");
  s->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->required();
  s->add_option("--robot", sa.robot, "Robot JSON file or bundled robot name")->required();
  s->add_option("--goal", sa.goals, "Goal pose x,y,z,qw,qx,qy,qz (repeatable)");
  s->add_option("--goal-file", sa.goal_file, "JSON list of [x,y,z,qw,qx,qy,qz] goals");
  s->add_option("--count", sa.count, "Samples per goal");
  s->add_option("--seed", sa.seed, "Random seed")->required();
  s->add_option("--out", sa.out, "Output JSON (stdout when omitted)");

  RefineArgs re;
  auto* r = app.add_subcommand("refine", "Levenberg-Marquardt multistart from random or learned initializations");
  r->add_option("--robot", re.robot, "Robot JSON file or bundled robot name")->required();
  r->add_option("--goal", re.goals, "Goal pose x,y,z,qw,qx,qy,qz (repeatable)");
  r->add_option("--goal-file", re.goal_file, "JSON list of [x,y,z,qw,qx,qy,qz] goals");
  r->add_option("--init", re.init, "random:K or checkpoint:K");
  r->add_option("--checkpoint", re.checkpoint, "Model checkpoint for checkpoint:K");
  r->add_option("--max-iterations", re.max_iterations, "Iteration cap per start");
  r->add_option("--seed", re.seed, "Random seed");
  r->add_option("--out", re.out, "Output file; .csv writes CSV, anything else JSON (stdout when omitted)");
  r->add_option("--workers", re.workers, "Worker threads");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Error statistics and success rate on random reachable goals");
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  e->add_option("--robot", ev.robots, "Robot JSON file or bundled robot name (repeatable)")->required();
  e->add_option("--problems", ev.problems, "Goals per robot");
  e->add_option("--samples-per-goal", ev.samples_per_goal, "Samples per goal for min-of-k scoring");
  e->add_option("--mmd-samples", ev.mmd_samples, "Samples per goal for MMD against rejection sampling (0 = off)");
  e->add_option("--seed", ev.seed, "Random seed");
  e->add_option("--out", ev.out, "Output file; .csv writes CSV, anything else JSON (stdout when omitted)");
  e->add_option("--workers", ev.workers, "Worker threads");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Sampling time as a function of sample count");
  b->add_option("--checkpoint", be.checkpoint, "Model checkpoint")->required();
  b->add_option("--robot", be.robot, "Robot JSON file or bundled robot name")->required();
  b->add_option("--counts", be.counts, "Sample counts")->delimiter(',');
  b->add_option("--repeats", be.repeats, "Timed repeats per count");
  b->add_option("--seed", be.seed, "Random seed");
  b->add_option("--out", be.out, "Output CSV (stdout when omitted)");

  std::string spec_path;
  auto* x = app.add_subcommand("experiment", "Run a multi-step experiment described by a JSON spec");
  x->add_option("--spec", spec_path, "Experiment JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kBadInput;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*s) return cmd_sample(sa);
    if (*r) return cmd_refine(re);
    if (*e) return cmd_eval(ev);
    if (*b) return cmd_bench(be);
    if (*x) return cmd_experiment(spec_path);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code(err.code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntimeFailure;
  }
  return kBadInput;
}
