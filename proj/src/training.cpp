#include "dgik/training.hpp"

#include "dgik/error.hpp"
#include "dgik/robot_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace dgik {

using diff::Matrix;
using diff::Tape;
using diff::Tensor;

namespace {

constexpr char kDataMagic[8] = {'D', 'G', 'I', 'K', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDataVersion = 1;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

std::uint64_t record_seed(std::uint64_t seed, std::uint64_t index) { return splitmix64(seed ^ splitmix64(index)); }

template <class Fn>
void parallel_for(int count, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

void append_bytes(std::string& buf, const void* data, std::size_t n) {
  buf.append(static_cast<const char*>(data), n);
}

std::string serialize_record(const DatasetRecord& r) {
  std::string buf;
  const std::uint32_t robot = static_cast<std::uint32_t>(r.robot);
  const std::uint32_t dof = static_cast<std::uint32_t>(r.q.size());
  append_bytes(buf, &robot, sizeof(robot));
  append_bytes(buf, &dof, sizeof(dof));
  append_bytes(buf, r.q.angles.data(), sizeof(double) * dof);
  // Stored column-major, 3 × N.
  const Eigen::Matrix<double, 3, Eigen::Dynamic> p = r.complete.positions.transpose();
  append_bytes(buf, p.data(), sizeof(double) * static_cast<std::size_t>(p.size()));
  return buf;
}

std::string dataset_header(const Dataset& ds) {
  nlohmann::json h;
  h["format"] = "dgik-dataset";
  h["seed"] = ds.seed;
  h["record_count"] = ds.records.size();
  h["robots"] = nlohmann::json::array();
  for (const auto& c : ds.robots) h["robots"].push_back(chain_to_json(c));
  h["counts"] = ds.counts_per_robot();
  return h.dump();
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<double> per_record(const Matrix& node_values, const std::vector<int>& offsets) {
  std::vector<double> out;
  for (std::size_t g = 0; g + 1 < offsets.size(); ++g)
    out.push_back(node_values.middleRows(offsets[g], offsets[g + 1] - offsets[g]).sum());
  return out;
}

}  // namespace

Tensor gmm_log_density(Tape& tape, const Tensor& z, const CvaeModel::Prior& p) {
  using namespace diff;
  const int K = static_cast<int>(p.log_weights.cols());
  const int L = static_cast<int>(z.cols());
  if (p.mu.cols() != static_cast<Index>(K) * L || p.log_sigma.cols() != p.mu.cols() || p.mu.rows() != z.rows())
    throw Error(ErrorCode::ShapeMismatch, "gmm_log_density: prior " + to_string(p.mu.shape()) + " with " +
                                              std::to_string(K) + " components does not match z " + to_string(z.shape()));
  std::vector<Tensor> copies(static_cast<std::size_t>(K), z);
  const Tensor zt = K == 1 ? z : concat_cols(copies);
  const Tensor u = mul(sub(zt, p.mu), exp(neg(p.log_sigma)));
  const Tensor per_dim = sub(scale(square(u), -0.5), p.log_sigma);
  // Block sums over each component's L columns.
  Matrix block = Matrix::Zero(static_cast<Index>(K) * L, K);
  for (int k = 0; k < K; ++k) block.block(static_cast<Index>(k) * L, k, L, 1).setOnes();
  const Tensor per_comp = add_scalar(add(matmul(per_dim, tape.constant(std::move(block))), p.log_weights),
                                     -0.5 * L * kLog2Pi);
  return logsumexp(per_comp);
}

Tensor reconstruction_log_likelihood(Tape& tape, const Tensor& mean, const Matrix& target) {
  using namespace diff;
  const Index D = target.cols();
  return add_scalar(scale(row_sum(square(sub(mean, tape.constant(target)))), -0.5),
                    -0.5 * static_cast<double>(D) * kLog2Pi);
}

KlSample kl_sample(Tape& tape, const Tensor& mu, const Tensor& log_sigma, const Matrix& eps,
                   const CvaeModel::Prior& prior) {
  using namespace diff;
  if (eps.rows() != mu.rows() || eps.cols() != mu.cols())
    throw Error(ErrorCode::ShapeMismatch, "kl_sample: noise [" + std::to_string(eps.rows()) + ", " +
                                              std::to_string(eps.cols()) + "] vs mean " + to_string(mu.shape()));
  const Index L = mu.cols();
  KlSample out;
  out.z = add(mu, mul(exp(log_sigma), tape.constant(eps)));
  // log q(z) written in terms of the standardized noise.
  const Matrix logq_const = (-0.5 * eps.rowwise().squaredNorm()).array() - 0.5 * static_cast<double>(L) * kLog2Pi;
  const Tensor logq = sub(tape.constant(logq_const), row_sum(log_sigma));
  out.kl = sub(logq, gmm_log_density(tape, out.z, prior));
  return out;
}

std::vector<int> Dataset::counts_per_robot() const {
  std::vector<int> counts(robots.size(), 0);
  for (const auto& r : records) counts.at(static_cast<std::size_t>(r.robot))++;
  return counts;
}

std::string Dataset::hash() const {
  std::uint64_t h = fnv1a(dataset_header(*this));
  for (const auto& r : records) h = fnv1a(serialize_record(r), h);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

DatasetRecord make_record(const KinematicChain& chain, int robot, const Configuration& q) {
  DatasetRecord r;
  r.robot = robot;
  r.q = q;
  r.complete = complete_graph_from_config(chain, q);
  r.partial = assemble_partial_graph(chain, end_effector_pose(chain, q));
  return r;
}

Dataset generate_dataset(const std::vector<KinematicChain>& chains, int samples_per_chain, std::uint64_t seed,
                         int workers) {
  if (chains.empty()) throw Error(ErrorCode::InvalidArgument, "generate_dataset: no chains");
  if (samples_per_chain < 0) throw Error(ErrorCode::InvalidArgument, "generate_dataset: negative sample count");
  Dataset ds;
  ds.robots = chains;
  ds.seed = seed;
  const int n_chains = static_cast<int>(chains.size());
  const int total = n_chains * samples_per_chain;
  ds.records.resize(static_cast<std::size_t>(total));
  parallel_for(total, workers, [&](int r) {
    const int robot = r % n_chains;
    std::mt19937_64 rng(record_seed(seed, static_cast<std::uint64_t>(r)));
    const KinematicChain& chain = chains[static_cast<std::size_t>(robot)];
    ds.records[static_cast<std::size_t>(r)] = make_record(chain, robot, sample_configuration(chain, rng));
  });
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write dataset '" + path + "'");
  const std::string header = dataset_header(ds);
  const std::uint64_t len = header.size();
  out.write(kDataMagic, sizeof(kDataMagic));
  out.write(reinterpret_cast<const char*>(&kDataVersion), sizeof(kDataVersion));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(len));
  for (const auto& r : ds.records) {
    const std::string body = serialize_record(r);
    const std::uint64_t n = body.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(body.data(), static_cast<std::streamsize>(n));
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing dataset '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open dataset '" + path + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kDataMagic, sizeof(magic)) != 0)
    throw Error(ErrorCode::Parse, "'" + path + "' is not a dataset file");
  if (version != kDataVersion)
    throw Error(ErrorCode::Parse, "'" + path + "': unsupported dataset version " + std::to_string(version));
  if (len > (1u << 30)) throw Error(ErrorCode::Parse, "'" + path + "': corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error(ErrorCode::Parse, "'" + path + "': truncated header");

  Dataset ds;
  std::size_t count = 0;
  try {
    const auto h = nlohmann::json::parse(text);
    ds.seed = h.at("seed").get<std::uint64_t>();
    count = h.at("record_count").get<std::size_t>();
    for (const auto& c : h.at("robots")) ds.robots.push_back(chain_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, "'" + path + "': bad dataset header: " + e.what());
  }
  ds.records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!in || n < 8 || n > (1u << 20))
      throw Error(ErrorCode::Parse, "'" + path + "': bad length for record " + std::to_string(i));
    std::string body(n, '\0');
    in.read(body.data(), static_cast<std::streamsize>(n));
    if (!in) throw Error(ErrorCode::Parse, "'" + path + "': truncated record " + std::to_string(i));
    std::uint32_t robot = 0, dof = 0;
    std::memcpy(&robot, body.data(), 4);
    std::memcpy(&dof, body.data() + 4, 4);
    if (robot >= ds.robots.size() || dof != ds.robots[robot].dof() ||
        n != 8 + sizeof(double) * (dof + 3 * (2 * static_cast<std::size_t>(dof) + 4)))
      throw Error(ErrorCode::Parse, "'" + path + "': record " + std::to_string(i) + " does not match its robot");
    Eigen::VectorXd q(dof);
    std::memcpy(q.data(), body.data() + 8, sizeof(double) * dof);
    DatasetRecord r = make_record(ds.robots[robot], static_cast<int>(robot), Configuration(q));
    Eigen::Matrix<double, 3, Eigen::Dynamic> stored(3, r.complete.vertex_count());
    std::memcpy(stored.data(), body.data() + 8 + sizeof(double) * dof, sizeof(double) * static_cast<std::size_t>(stored.size()));
    if ((stored.transpose() - r.complete.positions).cwiseAbs().maxCoeff() > 1e-9)
      throw Error(ErrorCode::Parse, "'" + path + "': record " + std::to_string(i) + " positions are inconsistent");
    ds.records.push_back(std::move(r));
  }
  return ds;
}

ElboTerms elbo(Tape& tape, const CvaeModel& model, std::span<const DatasetRecord* const> records,
               std::span<const std::uint64_t> noise_seeds, const ElboOptions& options) {
  using namespace diff;
  if (records.empty()) throw Error(ErrorCode::InvalidArgument, "elbo: empty batch");
  if (noise_seeds.size() != records.size())
    throw Error(ErrorCode::DimensionMismatch, "elbo: one noise seed per record required");
  if (options.kl_samples < 1) throw Error(ErrorCode::InvalidArgument, "elbo: kl_samples must be >= 1");
  const int L = model.config().latent_dim, S = options.kl_samples;

  std::vector<const DgGraph*> complete, partial;
  for (const auto* r : records) {
    complete.push_back(&r->complete);
    partial.push_back(&r->partial);
  }
  const GraphBatch cb = make_batch(complete);
  const GraphBatch pb = make_batch(partial);
  const Index n = cb.nodes();
  if (pb.nodes() != n) throw Error(ErrorCode::DimensionMismatch, "elbo: complete and partial graphs differ in size");

  // Noise: record r draws S blocks of N_r × L standard normals from its own stream.
  std::vector<Matrix> eps(static_cast<std::size_t>(S), Matrix(n, L));
  for (std::size_t r = 0; r < records.size(); ++r) {
    std::mt19937_64 rng(noise_seeds[r]);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int off = cb.offsets[r], cnt = cb.offsets[r + 1] - cb.offsets[r];
    for (int s = 0; s < S; ++s)
      for (int i = 0; i < cnt; ++i)
        for (int l = 0; l < L; ++l) eps[static_cast<std::size_t>(s)](off + i, l) = normal(rng);
  }

  const auto post = model.encode(tape, cb);
  const auto pri = model.prior(tape, pb);

  Tensor kl_nodes, z0;
  for (int s = 0; s < S; ++s) {
    const KlSample ks = kl_sample(tape, post.mu, post.log_sigma, eps[static_cast<std::size_t>(s)], pri);
    if (s == 0) z0 = ks.z;
    kl_nodes = s == 0 ? ks.kl : add(kl_nodes, ks.kl);
  }
  if (S > 1) kl_nodes = scale(kl_nodes, 1.0 / S);

  const Tensor mu = model.decode(tape, pb, z0);
  Matrix target(n, 3);
  for (std::size_t r = 0; r < records.size(); ++r)
    target.middleRows(cb.offsets[r], cb.offsets[r + 1] - cb.offsets[r]) = records[r]->complete.positions;
  const Tensor recon_nodes = reconstruction_log_likelihood(tape, mu, target);

  const Tensor objective = sub(recon_nodes, scale(kl_nodes, options.kl_weight));
  ElboTerms out;
  out.loss = scale(sum(objective), -1.0 / static_cast<double>(records.size()));
  out.recon = per_record(recon_nodes.value(), cb.offsets);
  out.kl = per_record(kl_nodes.value(), cb.offsets);
  if (!std::isfinite(out.loss.item())) {
    std::ostringstream os;
    double rs = 0, ks = 0;
    for (double v : out.recon) rs += v;
    for (double v : out.kl) ks += v;
    os << "elbo: non-finite loss (recon sum " << rs << ", kl sum " << ks << ")";
    throw Error(ErrorCode::NonFinite, os.str());
  }
  return out;
}

ElboValue elbo_value(const CvaeModel& model, const DatasetRecord& record, std::uint64_t noise_seed,
                     const ElboOptions& options) {
  Tape tape(false);
  const DatasetRecord* r = &record;
  const auto t = elbo(tape, model, std::span<const DatasetRecord* const>(&r, 1),
                      std::span<const std::uint64_t>(&noise_seed, 1), options);
  return {t.loss.item(), t.recon[0], t.kl[0]};
}

ElboSummary evaluate_elbo(const CvaeModel& model, std::span<const DatasetRecord> records, std::uint64_t seed,
                          int batch_size) {
  ElboSummary s;
  if (records.empty()) return s;
  batch_size = std::max(1, batch_size);
  for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const DatasetRecord*> batch;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&records[i]);
      seeds.push_back(record_seed(seed, i));
    }
    Tape tape(false);
    const auto t = elbo(tape, model, batch, seeds, {1.0, 1});
    for (std::size_t i = 0; i < batch.size(); ++i) {
      s.recon += t.recon[i];
      s.kl += t.kl[i];
    }
  }
  s.recon /= static_cast<double>(records.size());
  s.kl /= static_cast<double>(records.size());
  s.elbo = s.recon - s.kl;
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size < 1 || workers < 1 || kl_samples < 1 || plateau_patience < 1)
    throw Error(ErrorCode::InvalidArgument,
                "train config: epochs >= 0, batch_size >= 1, workers >= 1, kl_samples >= 1, patience >= 1 required");
  if (!(learning_rate > 0.0) || !(lr_decay > 0.0 && lr_decay <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "train config: learning_rate > 0 and lr_decay in (0, 1] required");
  if (!(kl_weight >= 0.0)) throw Error(ErrorCode::InvalidArgument, "train config: kl_weight must be >= 0");
  if (!(loss_smoothing >= 0.0 && loss_smoothing < 1.0))
    throw Error(ErrorCode::InvalidArgument, "train config: loss_smoothing must be in [0, 1)");
}

TrainResult train(CvaeModel& model, const Dataset& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (data.records.empty()) throw Error(ErrorCode::InvalidArgument, "train: dataset is empty");
  TrainResult result;
  const auto params = model.parameters();
  diff::AdamState adam;
  double lr = config.learning_rate;
  double best = std::numeric_limits<double>::infinity();
  double smoothed = 0.0;
  int stale = 0;
  const auto t_start = std::chrono::steady_clock::now();
  const std::size_t n = data.records.size();
  const ElboOptions opts{config.kl_weight, config.kl_samples};

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::vector<Matrix> snapshot;
    for (const auto* p : params) snapshot.push_back(p->value);
    const diff::AdamState adam_snapshot = adam;

    std::mt19937_64 shuffle_rng(splitmix64(config.seed ^ splitmix64(static_cast<std::uint64_t>(epoch))));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::uint64_t epoch_seed = splitmix64(config.seed + 0x51ed270b27a1f0b3ULL * static_cast<std::uint64_t>(epoch));

    double loss_sum = 0.0, recon_sum = 0.0, kl_sum = 0.0;
    try {
      for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
        const std::size_t bsize = end - start;
        for (auto* p : params) p->zero_grad();

        // Split the batch across workers; each runs its own tape.
        const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(config.workers), bsize));
        std::vector<diff::GradientBuffer> buffers(static_cast<std::size_t>(workers));
        std::vector<double> w_loss(static_cast<std::size_t>(workers), 0.0), w_recon(w_loss), w_kl(w_loss);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        parallel_for(workers, workers, [&](int w) {
          try {
            std::vector<const DatasetRecord*> batch;
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = start + static_cast<std::size_t>(w); i < end; i += static_cast<std::size_t>(workers)) {
              batch.push_back(&data.records[order[i]]);
              seeds.push_back(record_seed(epoch_seed, order[i]));
            }
            Tape tape;
            auto terms = elbo(tape, model, batch, seeds, opts);
            // Re-weight the worker mean so the summed gradient is the batch mean.
            const double share = static_cast<double>(batch.size()) / static_cast<double>(bsize);
            tape.backward(diff::scale(terms.loss, share), &buffers[static_cast<std::size_t>(w)]);
            w_loss[static_cast<std::size_t>(w)] = terms.loss.item() * static_cast<double>(batch.size());
            for (double v : terms.recon) w_recon[static_cast<std::size_t>(w)] += v;
            for (double v : terms.kl) w_kl[static_cast<std::size_t>(w)] += v;
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
        for (auto& b : buffers) b.flush();
        diff::adam_step(params, adam, {.lr = lr});
        for (int w = 0; w < workers; ++w) {
          loss_sum += w_loss[static_cast<std::size_t>(w)];
          recon_sum += w_recon[static_cast<std::size_t>(w)];
          kl_sum += w_kl[static_cast<std::size_t>(w)];
        }
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFinite) throw;
      for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = snapshot[k];
      adam = adam_snapshot;
      result.diverged = true;
      result.divergence_message = e.what();
      break;
    }

    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(n);
    st.recon = recon_sum / static_cast<double>(n);
    st.kl = kl_sum / static_cast<double>(n);
    smoothed = epoch == 1 ? st.loss : config.loss_smoothing * smoothed + (1.0 - config.loss_smoothing) * st.loss;
    st.smoothed_loss = smoothed;
    st.learning_rate = lr;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    result.trace.push_back(st);
    result.epochs_completed = epoch;

    if (smoothed < best - config.plateau_threshold * std::abs(best) || !std::isfinite(best)) {
      best = smoothed;
      stale = 0;
    } else if (++stale >= config.plateau_patience) {
      lr *= config.lr_decay;
      stale = 0;
    }
    if (!config.checkpoint_path.empty())
      save_checkpoint(config.checkpoint_path, model, {config.seed, data.hash(), epoch});
    if (on_epoch) on_epoch(st);
    if (config.time_budget_s > 0.0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count() >= config.time_budget_s)
      break;
  }
  return result;
}

}  // namespace dgik
