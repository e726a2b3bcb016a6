#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepcarve/data.hpp"
#include "deepcarve/image_io.hpp"
#include "deepcarve/loss.hpp"
#include "deepcarve/nn.hpp"

namespace deepcarve {

/// Indices of the K largest scores, returned in ascending index order. Ties
/// go to the lower index.
inline std::vector<std::size_t> predict_topk(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    throw std::out_of_range("predict_topk: K=" + std::to_string(k) + " outside [1," + std::to_string(scores.size()) + "]");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// |T ∩ P| / |P| for equally sized label sets.
inline double precision(std::span<const std::size_t> truth, std::span<const std::size_t> predicted) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("precision: |T|=" + std::to_string(truth.size()) + " but |P|=" +
                                std::to_string(predicted.size()));
  if (predicted.empty()) throw std::invalid_argument("precision: empty label sets");
  std::size_t hits = 0;
  for (auto p : predicted)
    if (std::find(truth.begin(), truth.end(), p) != truth.end()) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// True when at least one of the K predictions is correct (conventional
/// top-K accuracy, the weaker criterion).
inline bool topk_hit(std::span<const std::size_t> truth, std::span<const std::size_t> predicted) {
  return std::any_of(predicted.begin(), predicted.end(),
                     [&](std::size_t p) { return std::find(truth.begin(), truth.end(), p) != truth.end(); });
}

struct ImageRecord {
  std::string id;
  std::size_t k = 0;
  std::vector<std::size_t> truth;
  std::vector<std::size_t> predicted;
  std::size_t true_positives = 0;
  double precision = 0.0;
};

/// Per-attribute precision is the mean per-image precision over test images
/// whose ground truth contains that attribute.
struct PrecisionReport {
  double mean_precision = 0.0;
  std::vector<double> per_attribute;      // NaN where the attribute never occurs in T
  std::vector<std::size_t> per_attribute_count;
  std::vector<ImageRecord> records;
};

inline constexpr const char* kPerAttributeDefinition =
    "per-attribute precision = mean per-image top-K precision over test images whose ground truth contains the attribute";

/// Builds a report from per-image scores [N, M] and ground-truth sets.
inline PrecisionReport precision_report(const Tensor& scores, const std::vector<std::vector<std::size_t>>& truths,
                                        const std::vector<std::string>& ids = {}) {
  if (truths.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (scores.rank() != 2 || scores.dim(0) != truths.size()) throw std::invalid_argument("evaluate: score/label count mismatch");
  const std::size_t m = scores.dim(1);
  PrecisionReport rep;
  rep.per_attribute.assign(m, 0.0);
  rep.per_attribute_count.assign(m, 0);
  double total = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    ImageRecord rec;
    rec.id = i < ids.size() ? ids[i] : std::to_string(i);
    rec.truth = truths[i];
    rec.k = rec.truth.size();
    rec.predicted = predict_topk(scores.slice(i), rec.k);
    rec.precision = precision(rec.truth, rec.predicted);
    rec.true_positives = static_cast<std::size_t>(std::lround(rec.precision * static_cast<double>(rec.k)));
    total += rec.precision;
    for (auto a : rec.truth) {
      rep.per_attribute[a] += rec.precision;
      ++rep.per_attribute_count[a];
    }
    rep.records.push_back(std::move(rec));
  }
  rep.mean_precision = total / static_cast<double>(truths.size());
  for (std::size_t a = 0; a < m; ++a)
    rep.per_attribute[a] = rep.per_attribute_count[a] ? rep.per_attribute[a] / static_cast<double>(rep.per_attribute_count[a])
                                                      : std::nan("");
  return rep;
}

/// Sigmoid probabilities [N, M] for the items at `idx` from inference forwards.
inline Tensor predict_probabilities(const Network& net, const WeakDataset& ds, std::span<const std::size_t> idx,
                                    std::size_t batch_size = 64) {
  Tensor out = Tensor::zeros({idx.size(), net.num_outputs()});
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, idx.size());
    const Tensor logits = predict(net, gather_images(ds, idx.subspan(start, end - start)));
    for (std::size_t i = 0; i < logits.size(); ++i) out[start * net.num_outputs() + i] = sigmoid(logits[i]);
  }
  return out;
}

/// Strict top-K precision on the test split, K = |T| per image.
inline PrecisionReport evaluate(const Network& net, const WeakDataset& ds) {
  const auto idx = ds.indices(Split::test);
  if (idx.empty()) throw std::invalid_argument("evaluate: dataset has no test images");
  const Tensor probs = predict_probabilities(net, ds, idx);
  std::vector<std::vector<std::size_t>> truths;
  std::vector<std::string> ids;
  for (auto i : idx) {
    truths.push_back(ds.items[i].full_labels);
    ids.push_back(ds.items[i].id);
  }
  return precision_report(probs, truths, ids);
}

/// Top-1 agreement with the weak label on a train/val split; NaN when the
/// split is empty.
inline double weak_label_precision(const Network& net, const WeakDataset& ds, Split split) {
  const auto idx = ds.indices(split);
  if (idx.empty()) return std::nan("");
  const Tensor probs = predict_probabilities(net, ds, idx);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < idx.size(); ++i)
    if (predict_topk(probs.slice(i), 1)[0] == *ds.items[idx[i]].weak_label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

inline nlohmann::json report_json(const PrecisionReport& rep, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["mean_precision"] = rep.mean_precision;
  j["num_images"] = rep.records.size();
  j["per_attribute_definition"] = kPerAttributeDefinition;
  auto& per = j["per_attribute"];
  per = nlohmann::json::array();
  for (std::size_t a = 0; a < rep.per_attribute.size(); ++a) {
    nlohmann::json e;
    e["attribute"] = a < names.size() ? names[a] : std::to_string(a);
    e["images"] = rep.per_attribute_count[a];
    if (rep.per_attribute_count[a])
      e["precision"] = rep.per_attribute[a];
    else
      e["precision"] = nullptr;
    per.push_back(e);
  }
  return j;
}

inline void write_report(const std::filesystem::path& dir, const PrecisionReport& rep, const std::vector<std::string>& names) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "report.json");
    if (!os) throw std::runtime_error("cannot write report.json in " + dir.string());
    os << report_json(rep, names).dump(2) << "\n";
  }
  std::ofstream os(dir / "per_image.csv");
  if (!os) throw std::runtime_error("cannot write per_image.csv in " + dir.string());
  os << "image_id,k,truth,predicted,true_positives,precision\n";
  const auto join = [&](const std::vector<std::size_t>& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ";" : "") + (s[i] < names.size() ? names[s[i]] : std::to_string(s[i]));
    return out;
  };
  char buf[32];
  for (const auto& r : rep.records) {
    std::snprintf(buf, sizeof buf, "%.6f", r.precision);
    os << r.id << "," << r.k << "," << join(r.truth) << "," << join(r.predicted) << "," << r.true_positives << "," << buf << "\n";
  }
}

// Filter grid ------------------------------------------------------------------

struct FilterGridLayout {
  std::size_t tiles = 0, cols = 0, rows = 0, tile = 0, width = 0, height = 0;
};

/// Near-square tiling with 1-px separators: cols = ceil(sqrt(n)).
inline FilterGridLayout filter_grid_layout(std::size_t tiles, std::size_t kernel) {
  FilterGridLayout l;
  l.tiles = tiles;
  l.tile = kernel;
  l.cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(tiles))));
  while (l.cols * l.cols < tiles) ++l.cols;
  while (l.cols > 1 && (l.cols - 1) * (l.cols - 1) >= tiles) --l.cols;
  l.rows = (tiles + l.cols - 1) / l.cols;
  l.width = l.cols * (kernel + 1) + 1;
  l.height = l.rows * (kernel + 1) + 1;
  return l;
}

/// Accepts a conv tap id ("conv1") or a layer index into the network.
inline const ConvTap& resolve_conv_layer(const Network& net, const std::string& layer_id) {
  const bool numeric = !layer_id.empty() && layer_id.find_first_not_of("0123456789") == std::string::npos;
  if (!numeric) return net.tap(layer_id);
  const std::size_t index = std::stoul(layer_id);
  if (index >= net.layers().size())
    throw std::invalid_argument("layer " + layer_id + " out of range (network has " + std::to_string(net.layers().size()) +
                                " layers)");
  for (const auto& t : net.conv_taps())
    if (t.conv_layer == index) return t;
  throw std::invalid_argument("layer " + layer_id + " (" + to_string(net.spec().layers[index]) + ") is not a conv layer");
}

/// Renders conv filters min-max normalised per filter (a constant filter maps
/// to 0.5). Three-channel filters become RGB tiles; otherwise each
/// (filter, input channel) pair is its own gray tile. Separators are black.
inline Image8 render_filter_grid(const Network& net, const std::string& layer_id) {
  const ConvTap& tap = resolve_conv_layer(net, layer_id);
  const Layer& layer = net.layers()[tap.conv_layer];
  const auto& c = std::get<ConvSpec>(layer.spec);
  const std::size_t k = c.kernel, kk = k * k;
  const bool rgb = c.in_channels == 3;
  const std::size_t per_filter_tiles = rgb ? 1 : c.in_channels;
  const auto layout = filter_grid_layout(c.out_channels * per_filter_tiles, k);
  Image8 img{layout.width, layout.height, rgb ? 3u : 1u, {}};
  img.pixels.assign(img.width * img.height * img.channels, 0);
  for (std::size_t o = 0; o < c.out_channels; ++o) {
    const auto w = layer.weight.slice(o);  // [C*k*k]
    const auto [lo_it, hi_it] = std::minmax_element(w.begin(), w.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    const auto norm = [&](double v) { return range > 0.0 ? (v - lo) / range : 0.5; };
    const auto to8 = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    for (std::size_t t = 0; t < per_filter_tiles; ++t) {
      const std::size_t tile = o * per_filter_tiles + t;
      const std::size_t x0 = (tile % layout.cols) * (k + 1) + 1, y0 = (tile / layout.cols) * (k + 1) + 1;
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
          const std::size_t px = ((y0 + y) * img.width + x0 + x) * img.channels;
          if (rgb)
            for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[px + ch] = to8(norm(w[ch * kk + y * k + x]));
          else
            img.pixels[px] = to8(norm(w[t * kk + y * k + x]));
        }
    }
  }
  return img;
}

inline void export_filter_grid(const Network& net, const std::string& layer_id, const std::filesystem::path& out) {
  write_image(out, render_filter_grid(net, layer_id));
}

}  // namespace deepcarve
