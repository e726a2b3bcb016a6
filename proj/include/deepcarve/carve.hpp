#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcarve/data.hpp"
#include "deepcarve/loss.hpp"
#include "deepcarve/nn.hpp"
#include "deepcarve/parallel.hpp"
#include "deepcarve/tensor.hpp"

namespace deepcarve {

/// Class-mean response table: h[f][m] is the mean, over training images
/// labelled m, of the spatial mean of feature map f.
struct ResponseHistogram {
  std::vector<std::string> map_ids;  // "<tap>:<channel>" per feature map, network order
  Tensor h;                          // [F, M]
  std::vector<std::size_t> counts;   // training images per class

  std::size_t num_maps() const { return h.dim(0); }
  std::size_t num_classes() const { return h.dim(1); }
};

/// Per-image target vectors produced at one carving iteration. Row r belongs
/// to the r-th training item in dataset order.
struct PseudoLabelSet {
  std::size_t iteration = 0;
  double gamma = 0.7;
  std::vector<std::string> image_ids;
  Tensor labels;  // [N, M]
};

struct CarveParams {
  double gamma = 0.7;
  LabelEncoding encoding{};
  double dead_map_epsilon = 1e-8;
};

/// Feature-map ids in the column order of response_matrix().
inline std::vector<std::string> feature_map_ids(const Network& net) {
  std::vector<std::string> ids;
  for (const auto& t : net.conv_taps())
    for (std::size_t c = 0; c < t.channels; ++c) ids.push_back(t.id + ":" + std::to_string(c));
  return ids;
}

/// Inference-mode responses [N, F] for the given items, batched.
inline Tensor compute_responses(const Network& net, const WeakDataset& ds, std::span<const std::size_t> idx,
                                std::size_t batch_size = 64) {
  if (net.conv_taps().empty()) throw std::invalid_argument("carving needs at least one conv layer");
  const std::size_t f = net.total_feature_maps();
  Tensor out = Tensor::zeros({idx.size(), f});
  Rng unused;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, idx.size());
    const auto images = gather_images(ds, idx.subspan(start, end - start));
    const auto res = forward(net, images, unused, Mode::inference);
    const Tensor r = response_matrix(res.trace);
    for (std::size_t n = 0; n < end - start; ++n) {
      const auto row = r.slice(n);
      std::copy(row.begin(), row.end(), out.slice(start + n).begin());
    }
  }
  return out;
}

/// Histogram from a precomputed response matrix [N, F] and weak labels.
inline ResponseHistogram response_histogram(const Tensor& responses, std::span<const std::size_t> labels,
                                            std::size_t num_classes, std::vector<std::string> map_ids = {}) {
  if (responses.rank() != 2 || responses.dim(0) != labels.size())
    throw std::invalid_argument("response_histogram: " + std::to_string(labels.size()) + " labels for responses " +
                                shape_string(responses.shape()));
  const std::size_t n = responses.dim(0), f = responses.dim(1);
  ResponseHistogram hist;
  hist.counts.assign(num_classes, 0);
  for (auto l : labels) {
    if (l >= num_classes) throw std::out_of_range("response_histogram: label out of range");
    ++hist.counts[l];
  }
  for (std::size_t m = 0; m < num_classes; ++m)
    if (hist.counts[m] == 0) throw std::runtime_error("class " + std::to_string(m) + " has no training images");
  hist.h = Tensor::zeros({f, num_classes});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < f; ++k) hist.h.at(k, labels[r]) += responses.at(r, k);
  for (std::size_t k = 0; k < f; ++k)
    for (std::size_t m = 0; m < num_classes; ++m) hist.h.at(k, m) /= static_cast<double>(hist.counts[m]);
  if (map_ids.empty())
    for (std::size_t k = 0; k < f; ++k) map_ids.push_back("map" + std::to_string(k));
  if (map_ids.size() != f) throw std::invalid_argument("response_histogram: map id count mismatch");
  hist.map_ids = std::move(map_ids);
  return hist;
}

/// Pseudo-label rows from responses [N, F], weak labels and a histogram.
///
/// Per image r, map f and class m: the own class scores encoding.positive;
/// otherwise v/h when gamma*h <= v <= h (both ends inclusive), else
/// encoding.negative. A class whose mean response at a map is below
/// dead_map_epsilon scores encoding.negative there. Scores are averaged over
/// maps. The own-class entry is written as encoding.positive directly, which
/// is what the average of identical scores is.
inline Tensor pseudo_label_rows(const Tensor& responses, std::span<const std::size_t> labels,
                                const ResponseHistogram& hist, const CarveParams& params) {
  if (!(params.gamma > 0.0 && params.gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0,1]");
  if (responses.rank() != 2 || responses.dim(1) != hist.num_maps())
    throw std::invalid_argument("pseudo labels: responses " + shape_string(responses.shape()) + " do not match " +
                                std::to_string(hist.num_maps()) + " histogram feature maps");
  if (responses.dim(0) != labels.size()) throw std::invalid_argument("pseudo labels: label count mismatch");
  const std::size_t n = responses.dim(0), f = hist.num_maps(), m_count = hist.num_classes();
  Tensor out = Tensor::zeros({n, m_count});
  parallel_for(n, [&](std::size_t r) {
    auto row = out.slice(r);
    for (std::size_t k = 0; k < f; ++k) {
      const double v = responses.at(r, k);
      for (std::size_t m = 0; m < m_count; ++m) {
        if (m == labels[r]) continue;
        const double h = hist.h.at(k, m);
        double z = params.encoding.negative;
        if (h >= params.dead_map_epsilon && params.gamma * h <= v && v <= h) z = v / h;
        row[m] += z;
      }
    }
    // the mean of per-map scores can round just outside [negative, 1]
    for (std::size_t m = 0; m < m_count; ++m)
      row[m] = m == labels[r] ? params.encoding.positive
                              : std::clamp(row[m] / static_cast<double>(f), params.encoding.negative, 1.0);
  });
  return out;
}

namespace detail {
inline std::vector<std::size_t> train_labels(const WeakDataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> labels;
  labels.reserve(idx.size());
  for (auto i : idx) labels.push_back(*ds.items[i].weak_label);
  return labels;
}
}  // namespace detail

/// Histogram over the training split from an inference pass of `net`.
inline ResponseHistogram compute_response_histogram(const Network& net, const WeakDataset& ds) {
  const auto idx = ds.indices(Split::train);
  const Tensor responses = compute_responses(net, ds, idx);
  return response_histogram(responses, detail::train_labels(ds, idx), ds.num_classes(), feature_map_ids(net));
}

inline PseudoLabelSet generate_pseudo_labels(const Network& net, const WeakDataset& ds, const ResponseHistogram& hist,
                                             const CarveParams& params, std::size_t iteration = 0) {
  const auto idx = ds.indices(Split::train);
  if (feature_map_ids(net) != hist.map_ids)
    throw std::invalid_argument("histogram feature maps do not match the network's conv layers");
  if (hist.num_classes() != ds.num_classes()) throw std::invalid_argument("histogram class count does not match dataset");
  const Tensor responses = compute_responses(net, ds, idx);
  PseudoLabelSet set;
  set.iteration = iteration;
  set.gamma = params.gamma;
  set.labels = pseudo_label_rows(responses, detail::train_labels(ds, idx), hist, params);
  for (auto i : idx) set.image_ids.push_back(ds.items[i].id);
  return set;
}

/// Runs both stages on one inference pass.
inline std::pair<ResponseHistogram, PseudoLabelSet> carve(const Network& net, const WeakDataset& ds,
                                                           const CarveParams& params, std::size_t iteration) {
  const auto idx = ds.indices(Split::train);
  const Tensor responses = compute_responses(net, ds, idx);
  const auto labels = detail::train_labels(ds, idx);
  auto hist = response_histogram(responses, labels, ds.num_classes(), feature_map_ids(net));
  PseudoLabelSet set;
  set.iteration = iteration;
  set.gamma = params.gamma;
  set.labels = pseudo_label_rows(responses, labels, hist, params);
  for (auto i : idx) set.image_ids.push_back(ds.items[i].id);
  return {std::move(hist), std::move(set)};
}

/// True at completed-epoch counts warmup, warmup + period, ...
inline bool carving_schedule(std::size_t epoch, std::size_t warmup_epochs, std::size_t period) {
  if (period == 0) throw std::invalid_argument("carving period must be >= 1");
  return epoch >= warmup_epochs && (epoch - warmup_epochs) % period == 0;
}

inline void write_pseudo_labels_csv(const std::filesystem::path& path, const PseudoLabelSet& set) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "image_id";
  for (std::size_t m = 0; m < set.labels.dim(1); ++m) os << ",class_" << m;
  os << "\n";
  char buf[32];
  for (std::size_t r = 0; r < set.labels.dim(0); ++r) {
    os << set.image_ids[r];
    for (std::size_t m = 0; m < set.labels.dim(1); ++m) {
      std::snprintf(buf, sizeof buf, "%.17g", set.labels.at(r, m));
      os << "," << buf;
    }
    os << "\n";
  }
}

inline void write_histogram_csv(const std::filesystem::path& path, const ResponseHistogram& hist,
                                const std::vector<std::string>& class_names) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "feature_map";
  for (const auto& n : class_names) os << "," << n;
  os << "\n";
  char buf[32];
  for (std::size_t k = 0; k < hist.num_maps(); ++k) {
    os << hist.map_ids[k];
    for (std::size_t m = 0; m < hist.num_classes(); ++m) {
      std::snprintf(buf, sizeof buf, "%.17g", hist.h.at(k, m));
      os << "," << buf;
    }
    os << "\n";
  }
}

}  // namespace deepcarve
