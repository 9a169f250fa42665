#pragma once

#include "dgik/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dgik {

struct DatasetRecord {
  int robot = 0;        ///< index into Dataset::robots
  Configuration q;      ///< source configuration (diagnostics only)
  DgGraph complete;
  DgGraph partial;
};

struct Dataset {
  std::vector<KinematicChain> robots;
  std::vector<DatasetRecord> records;
  std::uint64_t seed = 0;

  std::vector<int> counts_per_robot() const;
  /// FNV-1a over the serialized form; identical datasets hash identically.
  std::string hash() const;
};

/// Uniform configurations → FK → graphs. Record r belongs to robot
/// r mod |chains| (round-robin) and is drawn from its own seeded stream.
Dataset generate_dataset(const std::vector<KinematicChain>& chains, int samples_per_chain, std::uint64_t seed,
                         int workers = 1);

/// Builds the record for one configuration.
DatasetRecord make_record(const KinematicChain& chain, int robot, const Configuration& q);

/// Binary file: magic, version, JSON header (robots, counts, seed), then
/// length-prefixed records.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

/// One reparameterized draw z = μ + σ·ε and its per-node Monte Carlo KL
/// term log q(z) − log p(z) (n×1) against a diagonal-Gaussian-mixture prior.
struct KlSample {
  diff::Tensor z;
  diff::Tensor kl;
};
KlSample kl_sample(diff::Tape& tape, const diff::Tensor& mu, const diff::Tensor& log_sigma, const diff::Matrix& eps,
                   const CvaeModel::Prior& prior);

/// log Σ_k π_k N(z | μ_k, σ_k²) per row.
diff::Tensor gmm_log_density(diff::Tape& tape, const diff::Tensor& z, const CvaeModel::Prior& prior);

/// Per-node Gaussian log-likelihood with identity covariance (n×1).
diff::Tensor reconstruction_log_likelihood(diff::Tape& tape, const diff::Tensor& mean, const diff::Matrix& target);

struct ElboOptions {
  double kl_weight = 1.0;
  int kl_samples = 1;
};

/// Batch objective on a tape. `loss` is the mean over records of
/// −(recon − kl_weight·kl); the per-record terms are returned as values.
struct ElboTerms {
  diff::Tensor loss;
  std::vector<double> recon;  ///< per record
  std::vector<double> kl;     ///< per record
};

/// `noise_seeds[r]` drives every latent draw for record r, so a record's
/// terms do not depend on which batch it is placed in.
ElboTerms elbo(diff::Tape& tape, const CvaeModel& model, std::span<const DatasetRecord* const> records,
               std::span<const std::uint64_t> noise_seeds, const ElboOptions& options = {});

/// Single record convenience returning (loss, recon, kl) values.
struct ElboValue {
  double loss = 0.0, recon = 0.0, kl = 0.0;
};
ElboValue elbo_value(const CvaeModel& model, const DatasetRecord& record, std::uint64_t noise_seed,
                     const ElboOptions& options = {});

/// Mean ELBO (recon − kl, unit KL weight) over records, evaluated in batches.
struct ElboSummary {
  double elbo = 0.0, recon = 0.0, kl = 0.0;
};
ElboSummary evaluate_elbo(const CvaeModel& model, std::span<const DatasetRecord> records, std::uint64_t seed,
                          int batch_size = 64);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double lr_decay = 0.5;          ///< multiplier applied on plateau
  int plateau_patience = 10;      ///< epochs
  double plateau_threshold = 0.01;///< relative improvement required
  double loss_smoothing = 0.5;    ///< EMA factor on epoch losses
  double kl_weight = 1.0;
  int kl_samples = 1;
  std::uint64_t seed = 0;
  int workers = 1;
  /// Written after every completed epoch when non-empty.
  std::string checkpoint_path;
  /// Stop after this many seconds of training (0 = unlimited); the current
  /// epoch is completed first.
  double time_budget_s = 0.0;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double smoothed_loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> trace;
  bool diverged = false;
  std::string divergence_message;
  int epochs_completed = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Adam over shuffled mini-batches with plateau learning-rate decay. On a
/// non-finite loss or gradient the parameters of the last completed epoch
/// are restored and training stops with `diverged` set.
TrainResult train(CvaeModel& model, const Dataset& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace dgik
