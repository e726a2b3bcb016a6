#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcarve/carve.hpp"
#include "deepcarve/data.hpp"
#include "deepcarve/eval.hpp"
#include "deepcarve/hash.hpp"
#include "deepcarve/loss.hpp"
#include "deepcarve/nn.hpp"
#include "deepcarve/rng.hpp"

namespace deepcarve {

enum class LossHead { softmax, sigmoid_ce, deep_carve };

inline const char* to_string(LossHead h) {
  switch (h) {
    case LossHead::softmax: return "softmax";
    case LossHead::sigmoid_ce: return "sigmoid_ce";
    case LossHead::deep_carve: return "deep_carve";
  }
  return "?";
}

inline LossHead parse_loss_head(const std::string& s) {
  if (s == "softmax") return LossHead::softmax;
  if (s == "sigmoid_ce") return LossHead::sigmoid_ce;
  if (s == "deep_carve") return LossHead::deep_carve;
  throw std::invalid_argument("unknown loss head '" + s + "' (expected softmax, sigmoid_ce or deep_carve)");
}

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t lr_decay_every = 0;  // epochs; 0 disables step decay
  double lr_decay_factor = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  std::optional<std::size_t> warmup_epochs;  // unset: 12% of max_epochs
  std::size_t carve_period = 5;
  double gamma = 0.7;
  LabelEncoding encoding{};
  std::uint64_t seed = 1;
  LossHead loss = LossHead::deep_carve;
  std::filesystem::path run_dir;  // empty: keep everything in memory
  std::size_t checkpoint_every = 0;

  std::size_t resolved_warmup() const {
    return warmup_epochs ? *warmup_epochs : static_cast<std::size_t>(std::lround(0.12 * static_cast<double>(max_epochs)));
  }

  CarveParams carve_params() const { return CarveParams{gamma, encoding, 1e-8}; }

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
    if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("lr decay factor must be > 0");
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
    if (max_epochs == 0) throw std::invalid_argument("max epochs must be >= 1");
    if (carve_period == 0) throw std::invalid_argument("carve period must be >= 1");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0,1]");
    if (!(encoding.negative >= 0.0 && encoding.positive <= 1.0 && encoding.negative < encoding.positive))
      throw std::invalid_argument("label encoding needs 0 <= negative < positive <= 1");
    if (loss == LossHead::deep_carve && max_epochs < resolved_warmup())
      throw std::invalid_argument("max epochs must be >= warmup epochs in deep_carve mode");
  }

  /// Hash of every setting that shapes the optimisation trajectory. The epoch
  /// budget is excluded so a run can be extended on resume.
  std::uint64_t fingerprint(std::uint64_t net_spec_hash) const {
    Fnv1a h;
    h.u64(net_spec_hash).str(to_string(loss)).f64(learning_rate).f64(momentum).f64(weight_decay);
    h.u64(lr_decay_every).f64(lr_decay_factor).u64(batch_size).u64(resolved_warmup()).u64(carve_period);
    h.f64(gamma).f64(encoding.positive).f64(encoding.negative).u64(seed);
    return h.value();
  }

  double learning_rate_at(std::size_t completed_epochs) const {
    if (lr_decay_every == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay_factor, static_cast<double>(completed_epochs / lr_decay_every));
  }
};

struct MetricRow {
  std::size_t epoch = 0;
  std::string phase;
  double loss = 0.0;
  double val_precision = 0.0;
  std::size_t carve_iteration = 0;
};

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  std::size_t iteration = 0;
  std::vector<Tensor> velocity;
  std::optional<PseudoLabelSet> pseudo;  // empty: weak targets
  std::optional<std::size_t> last_carve_epoch;
  std::vector<MetricRow> history;
  Rng rng;

  std::size_t carve_iteration() const { return pseudo ? pseudo->iteration : 0; }
};

struct TrainHooks {
  std::function<void(const ResponseHistogram&, const PseudoLabelSet&, std::size_t epoch)> on_carve;
  std::function<void(const MetricRow&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRow> metrics;
};

/// v <- momentum*v - lr*(g + decay*w); w <- w + v.
inline void sgd_step(Network& net, const Gradients& grads, TrainState& state, const TrainConfig& config, double lr) {
  const auto g = grads.flat();
  const auto params = net.parameters();
  if (g.size() != params.size()) throw std::logic_error("sgd_step: gradient/parameter count mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i]->shape() != params[i]->shape()) throw std::logic_error("sgd_step: gradient shape mismatch");
    for (std::size_t j = 0; j < g[i]->size(); ++j)
      if (!std::isfinite((*g[i])[j]))
        throw std::runtime_error("non-finite gradient in parameter tensor " + std::to_string(i) + " (shape " +
                                 shape_string(g[i]->shape()) + ", entry " + std::to_string(j) + ", iteration " +
                                 std::to_string(state.iteration) + "); try a lower learning rate");
  }
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto* p : params) state.velocity.push_back(Tensor::zeros(p->shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i];
    Tensor& v = state.velocity[i];
    const Tensor& gi = *g[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = config.momentum * v[j] - lr * (gi[j] + config.weight_decay * w[j]);
      w[j] += v[j];
    }
  }
  ++state.iteration;
}

inline void sgd_step(Network& net, const Gradients& grads, TrainState& state, const TrainConfig& config) {
  sgd_step(net, grads, state, config, config.learning_rate_at(state.epoch));
}

// Checkpoints --------------------------------------------------------------------
// network section, then "CVTS1" train-state section, then a u64 FNV-1a
// checksum over everything before it.

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_u32(is);
  if (n > (1u << 24)) throw std::runtime_error("string field too long");
  std::string s(n, '\0');
  read_exact(is, reinterpret_cast<unsigned char*>(s.data()), n);
  return s;
}

inline void write_state(std::ostream& os, const TrainState& st, std::uint64_t config_fp, std::uint64_t seed) {
  os.write("CVTS1", 5);
  write_u64(os, config_fp);
  write_u64(os, seed);
  write_u64(os, st.epoch);
  write_u64(os, st.iteration);
  for (auto s : st.rng.state()) write_u64(os, s);
  write_u32(os, static_cast<std::uint32_t>(st.velocity.size()));
  for (const auto& v : st.velocity) write_tensor(os, v);
  os.put(st.pseudo ? 1 : 0);
  if (st.pseudo) {
    write_u64(os, st.pseudo->iteration);
    write_f64(os, st.pseudo->gamma);
    write_u32(os, static_cast<std::uint32_t>(st.pseudo->image_ids.size()));
    for (const auto& id : st.pseudo->image_ids) write_string(os, id);
    write_tensor(os, st.pseudo->labels);
  }
  os.put(st.last_carve_epoch ? 1 : 0);
  if (st.last_carve_epoch) write_u64(os, *st.last_carve_epoch);
  write_u32(os, static_cast<std::uint32_t>(st.history.size()));
  for (const auto& r : st.history) {
    write_u64(os, r.epoch);
    write_string(os, r.phase);
    write_f64(os, r.loss);
    write_f64(os, r.val_precision);
    write_u64(os, r.carve_iteration);
  }
}

inline bool read_flag(std::istream& is) {
  unsigned char b;
  read_exact(is, &b, 1);
  if (b > 1) throw std::runtime_error("bad flag byte");
  return b == 1;
}

}  // namespace detail

struct Checkpoint {
  Network net;
  TrainState state;
  std::uint64_t config_fingerprint = 0;
  std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const Network& net, const TrainState& state,
                            const TrainConfig& config) {
  std::ostringstream buf(std::ios::binary);
  write_network(buf, net);
  detail::write_state(buf, state, config.fingerprint(spec_hash(net.spec())), config.seed);
  const std::string bytes = buf.str();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    detail::write_u64(os, fnv1a(bytes));
    if (!os) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint. The whole file is checksummed before anything is
/// parsed, so a damaged file never yields a partially restored state.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw std::runtime_error("checkpoint " + path.string() + " is truncated");
  const std::string body = bytes.substr(0, bytes.size() - 8);
  std::istringstream tail(bytes.substr(bytes.size() - 8), std::ios::binary);
  if (detail::read_u64(tail) != fnv1a(body))
    throw std::runtime_error("checkpoint " + path.string() + " is corrupt (checksum mismatch)");
  std::istringstream in(body, std::ios::binary);
  Checkpoint ck;
  try {
    ck.net = read_network(in);
    unsigned char magic[5];
    detail::read_exact(in, magic, 5);
    if (std::memcmp(magic, "CVTS1", 5) != 0) throw std::runtime_error("missing train-state section");
    ck.config_fingerprint = detail::read_u64(in);
    ck.seed = detail::read_u64(in);
    ck.state.epoch = detail::read_u64(in);
    ck.state.iteration = detail::read_u64(in);
    Rng::State rs;
    for (auto& s : rs) s = detail::read_u64(in);
    ck.state.rng = Rng::from_state(rs);
    const auto nv = detail::read_u32(in);
    for (std::uint32_t i = 0; i < nv; ++i) ck.state.velocity.push_back(read_tensor(in));
    if (detail::read_flag(in)) {
      PseudoLabelSet p;
      p.iteration = detail::read_u64(in);
      p.gamma = detail::read_f64(in);
      const auto n = detail::read_u32(in);
      for (std::uint32_t i = 0; i < n; ++i) p.image_ids.push_back(detail::read_string(in));
      p.labels = read_tensor(in);
      ck.state.pseudo = std::move(p);
    }
    if (detail::read_flag(in)) ck.state.last_carve_epoch = detail::read_u64(in);
    const auto nh = detail::read_u32(in);
    for (std::uint32_t i = 0; i < nh; ++i) {
      MetricRow r;
      r.epoch = detail::read_u64(in);
      r.phase = detail::read_string(in);
      r.loss = detail::read_f64(in);
      r.val_precision = detail::read_f64(in);
      r.carve_iteration = detail::read_u64(in);
      ck.state.history.push_back(std::move(r));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes");
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + " is malformed: " + e.what());
  }
  return ck;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,phase,loss,val_precision,carve_iteration\n";
  char loss[40], val[40];
  for (const auto& r : rows) {
    std::snprintf(loss, sizeof loss, "%.17g", r.loss);
    std::snprintf(val, sizeof val, "%.17g", r.val_precision);
    os << r.epoch << "," << r.phase << "," << loss << "," << val << "," << r.carve_iteration << "\n";
  }
}

// Training loop --------------------------------------------------------------------

namespace detail {

inline std::string phase_name(const TrainConfig& config, const TrainState& state) {
  switch (config.loss) {
    case LossHead::softmax: return "softmax";
    case LossHead::sigmoid_ce: return "weak";
    case LossHead::deep_carve: return state.pseudo ? "carve" : "warmup";
  }
  return "?";
}

inline void run_training(const WeakDataset& ds, Network& net, TrainState& state, const TrainConfig& config,
                         const TrainHooks& hooks) {
  config.validate();
  if (net.num_outputs() != ds.num_classes())
    throw std::invalid_argument("network has " + std::to_string(net.num_outputs()) + " outputs but the dataset has " +
                                std::to_string(ds.num_classes()) + " attributes");
  const auto train_idx = ds.indices(Split::train);
  if (train_idx.empty()) throw std::invalid_argument("dataset has no training images");
  std::vector<std::size_t> row_of(ds.items.size(), 0);
  for (std::size_t r = 0; r < train_idx.size(); ++r) row_of[train_idx[r]] = r;
  if (state.pseudo && state.pseudo->labels.dim(0) != train_idx.size())
    throw std::runtime_error("restored pseudo-labels do not match the training set size");

  const auto& dir = config.run_dir;
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::size_t warmup = config.resolved_warmup();
  const std::size_t m = ds.num_classes();

  for (;;) {
    const std::size_t completed = state.epoch;
    if (config.loss == LossHead::deep_carve && carving_schedule(completed, warmup, config.carve_period) &&
        state.last_carve_epoch != completed) {
      auto [hist, set] = carve(net, ds, config.carve_params(), state.carve_iteration() + 1);
      state.pseudo = std::move(set);
      state.last_carve_epoch = completed;
      if (hooks.on_carve) hooks.on_carve(hist, *state.pseudo, completed);
      if (!dir.empty()) {
        const auto c = std::to_string(state.pseudo->iteration);
        write_pseudo_labels_csv(dir / ("pseudo_labels_c" + c + ".csv"), *state.pseudo);
        write_histogram_csv(dir / ("histogram_c" + c + ".csv"), hist, ds.attributes);
        save_checkpoint(dir / ("checkpoint_c" + c + ".ckpt"), net, state, config);
      }
    }
    if (completed >= config.max_epochs) break;

    const double lr = config.learning_rate_at(completed);
    BatchIterator batches(ds, Split::train, config.batch_size, state.rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    while (auto batch = batches.next()) {
      const std::size_t b = batch->indices.size();
      auto fwd = forward(net, batch->images, state.rng, Mode::train);
      std::vector<std::size_t> labels;
      labels.reserve(b);
      for (auto i : batch->indices) labels.push_back(*ds.items[i].weak_label);
      LossResult lr_res;
      if (config.loss == LossHead::softmax) {
        lr_res = softmax_nll(fwd.logits, labels);
      } else if (state.pseudo) {
        Tensor targets = Tensor::zeros({b, m});
        for (std::size_t k = 0; k < b; ++k) {
          const auto src = state.pseudo->labels.slice(row_of[batch->indices[k]]);
          std::copy(src.begin(), src.end(), targets.slice(k).begin());
        }
        lr_res = carving_loss(fwd.logits, targets);
      } else {
        lr_res = sigmoid_ce(fwd.logits, weak_targets(labels, m, config.encoding));
      }
      const Gradients grads = backward(net, fwd.trace, lr_res.grad, false);
      sgd_step(net, grads, state, config, lr);
      loss_sum += lr_res.loss * static_cast<double>(b);
      seen += b;
    }
    state.epoch = completed + 1;
    MetricRow row;
    row.epoch = state.epoch;
    row.phase = phase_name(config, state);
    row.loss = loss_sum / static_cast<double>(seen);
    row.val_precision = weak_label_precision(net, ds, Split::val);
    row.carve_iteration = state.carve_iteration();
    state.history.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
    if (!dir.empty()) {
      write_metrics_csv(dir / "metrics.csv", state.history);
      if (config.checkpoint_every && state.epoch % config.checkpoint_every == 0)
        save_checkpoint(dir / ("checkpoint_e" + std::to_string(state.epoch) + ".ckpt"), net, state, config);
    }
  }
  if (!dir.empty()) {
    write_metrics_csv(dir / "metrics.csv", state.history);
    save_checkpoint(dir / "checkpoint_final.ckpt", net, state, config);
  }
}

}  // namespace detail

/// Trains `net` in place from a fresh state seeded by config.seed.
inline TrainResult train(const WeakDataset& ds, Network& net, const TrainConfig& config, const TrainHooks& hooks = {}) {
  TrainResult res;
  res.state.rng = Rng(config.seed);
  detail::run_training(ds, net, res.state, config, hooks);
  res.metrics = res.state.history;
  return res;
}

/// Continues a run from a checkpoint; the configured seed and trajectory
/// settings must match those the checkpoint was written under. A non-zero
/// `expected_spec_hash` also pins the network architecture.
inline std::pair<Network, TrainResult> resume(const std::filesystem::path& checkpoint, const WeakDataset& ds,
                                              const TrainConfig& config, const TrainHooks& hooks = {},
                                              std::uint64_t expected_spec_hash = 0) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (expected_spec_hash && spec_hash(ck.net.spec()) != expected_spec_hash)
    throw std::runtime_error("checkpoint network (" + describe(ck.net.spec()) + ") does not match the configured architecture");
  if (ck.seed != config.seed)
    throw std::runtime_error("checkpoint was written with seed " + std::to_string(ck.seed) + ", config has seed " +
                             std::to_string(config.seed));
  if (ck.config_fingerprint != config.fingerprint(spec_hash(ck.net.spec())))
    throw std::runtime_error("checkpoint training settings do not match the config (fingerprint mismatch)");
  TrainResult res;
  res.state = std::move(ck.state);
  detail::run_training(ds, ck.net, res.state, config, hooks);
  res.metrics = res.state.history;
  return {std::move(ck.net), std::move(res)};
}

}  // namespace deepcarve
