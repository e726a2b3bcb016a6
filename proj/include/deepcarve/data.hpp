#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "deepcarve/hash.hpp"
#include "deepcarve/image_io.hpp"
#include "deepcarve/rng.hpp"
#include "deepcarve/tensor.hpp"

namespace deepcarve {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct Item {
  std::string id;                       // e.g. "train/dense/000012" or "test/t000003"
  Tensor image;                         // [C,H,W], values in [0,1]
  Split split = Split::train;
  std::optional<std::size_t> weak_label;  // train/val only
  std::vector<std::size_t> full_labels;   // test ground truth, sorted
};

/// Images with one observed attribute each (train/val) and complete
/// attribute sets for the test split.
struct WeakDataset {
  std::vector<std::string> attributes;
  std::vector<Item> items;

  std::size_t num_classes() const { return attributes.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].split == s) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> class_counts(Split s) const {
    std::vector<std::size_t> counts(num_classes(), 0);
    for (const auto& it : items)
      if (it.split == s && it.weak_label) ++counts[*it.weak_label];
    return counts;
  }

  std::size_t attribute_index(const std::string& name) const {
    const auto it = std::find(attributes.begin(), attributes.end(), name);
    if (it == attributes.end()) throw std::runtime_error("unknown attribute name '" + name + "'");
    return static_cast<std::size_t>(it - attributes.begin());
  }

  const Shape& image_shape() const {
    if (items.empty()) throw std::runtime_error("dataset has no images");
    return items.front().image.shape();
  }

  /// Enforces the weak-label invariants; throws on the first violation.
  void validate() const {
    if (attributes.empty()) throw std::runtime_error("dataset defines no attributes");
    std::set<std::string> names(attributes.begin(), attributes.end());
    if (names.size() != attributes.size()) throw std::runtime_error("duplicate attribute names");
    for (const auto& it : items) {
      if (it.image.shape() != items.front().image.shape())
        throw std::runtime_error("image " + it.id + " has shape " + shape_string(it.image.shape()) + ", expected " +
                                 shape_string(items.front().image.shape()));
      if (it.split == Split::test) {
        if (it.full_labels.empty()) throw std::runtime_error("test image " + it.id + " has no labels");
        for (auto l : it.full_labels)
          if (l >= num_classes()) throw std::runtime_error("test image " + it.id + " has an out-of-range label");
      } else {
        if (!it.weak_label || *it.weak_label >= num_classes())
          throw std::runtime_error(std::string(to_string(it.split)) + " image " + it.id + " needs exactly one label");
      }
    }
    const auto counts = class_counts(Split::train);
    for (std::size_t m = 0; m < counts.size(); ++m)
      if (counts[m] == 0) throw std::runtime_error("attribute class '" + attributes[m] + "' has no training images");
  }
};

/// Hash of everything in the dataset (names, ids, labels, pixels).
inline std::uint64_t fingerprint(const WeakDataset& ds) {
  Fnv1a h;
  for (const auto& a : ds.attributes) h.str(a);
  for (const auto& it : ds.items) {
    h.str(it.id).u64(static_cast<std::uint64_t>(it.split));
    h.u64(it.weak_label ? *it.weak_label + 1 : 0);
    h.u64(it.full_labels.size());
    for (auto l : it.full_labels) h.u64(l);
    h.f64s(it.image.data());
  }
  return h.value();
}

/// Stacks the images at `idx` into [B, C, H, W].
inline Tensor gather_images(const WeakDataset& ds, std::span<const std::size_t> idx) {
  if (idx.empty()) throw std::invalid_argument("gather_images: empty index list");
  Shape s{idx.size()};
  const auto& is = ds.items[idx[0]].image.shape();
  s.insert(s.end(), is.begin(), is.end());
  Tensor out(s);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto src = ds.items[idx[b]].image.data();
    std::copy(src.begin(), src.end(), out.slice(b).begin());
  }
  return out;
}

// Co-occurrence -----------------------------------------------------------------

/// entry(i,j) = |{images containing i and j}| / |{images containing i}|.
/// Rows whose attribute never occurs are stored as zeros with defined[i] = false.
struct CooccurrenceMatrix {
  Tensor values;
  std::vector<bool> defined;
};

inline CooccurrenceMatrix cooccurrence_from_sets(const std::vector<std::vector<std::size_t>>& label_sets,
                                                 std::size_t num_classes) {
  CooccurrenceMatrix cm{Tensor::zeros({num_classes, num_classes}), std::vector<bool>(num_classes, false)};
  std::vector<double> row_count(num_classes, 0.0);
  for (const auto& raw : label_sets) {
    std::vector<std::size_t> set = raw;
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
    for (auto i : set) {
      if (i >= num_classes) throw std::out_of_range("cooccurrence: label out of range");
      row_count[i] += 1.0;
      for (auto j : set) cm.values.at(i, j) += 1.0;
    }
  }
  for (std::size_t i = 0; i < num_classes; ++i) {
    if (row_count[i] == 0.0) continue;
    cm.defined[i] = true;
    for (std::size_t j = 0; j < num_classes; ++j) cm.values.at(i, j) /= row_count[i];
  }
  return cm;
}

/// Uses full labels on the test split and the single weak label elsewhere.
inline CooccurrenceMatrix cooccurrence(const WeakDataset& ds, Split split) {
  std::vector<std::vector<std::size_t>> sets;
  for (const auto& it : ds.items) {
    if (it.split != split) continue;
    if (split == Split::test)
      sets.push_back(it.full_labels);
    else
      sets.push_back({*it.weak_label});
  }
  return cooccurrence_from_sets(sets, ds.num_classes());
}

inline void write_cooccurrence_csv(const std::filesystem::path& path, const CooccurrenceMatrix& cm,
                                   const std::vector<std::string>& names) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "attribute";
  for (const auto& n : names) os << "," << n;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < names.size(); ++i) {
    os << names[i];
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (cm.defined[i]) {
        std::snprintf(buf, sizeof buf, "%.6f", cm.values.at(i, j));
        os << "," << buf;
      } else {
        os << ",";
      }
    }
    os << "\n";
  }
}

// Batching ----------------------------------------------------------------------

struct Batch {
  std::vector<std::size_t> indices;  // dataset item indices
  Tensor images;                     // [B, C, H, W]
};

/// One shuffled pass over a split; the final batch may be short.
class BatchIterator {
 public:
  BatchIterator(const WeakDataset& ds, Split split, std::size_t batch_size, Rng& rng)
      : ds_(&ds), order_(ds.indices(split)), batch_size_(batch_size) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
    rng.shuffle(order_);
  }

  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

  std::optional<Batch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(pos_ + batch_size_, order_.size());
    Batch b;
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_), order_.begin() + static_cast<std::ptrdiff_t>(end));
    b.images = gather_images(*ds_, b.indices);
    pos_ = end;
    return b;
  }

 private:
  const WeakDataset* ds_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
};

// On-disk format ----------------------------------------------------------------
//   root/attributes.txt               one attribute name per line (defines order)
//   root/{train,val}/<attribute>/*    .pgm or .png images
//   root/test/images/*                .pgm or .png images
//   root/test/labels.csv              image_id, semicolon-separated attribute names

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline Tensor image_to_tensor(const Image8& img) {
  Tensor t({img.channels, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        t.at(c, y, x) = img.pixels[(y * img.width + x) * img.channels + c] / 255.0;
  return t;
}

inline Image8 tensor_to_image(const Tensor& t) {
  Image8 img{t.dim(2), t.dim(1), t.dim(0), {}};
  img.pixels.resize(t.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
        img.pixels[(y * img.width + x) * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

inline std::vector<std::filesystem::path> sorted_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return files;
}

inline void load_class_split(WeakDataset& ds, const std::filesystem::path& root, Split split) {
  const auto dir = root / to_string(split);
  if (!std::filesystem::exists(dir)) return;
  std::vector<std::filesystem::path> class_dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  for (const auto& cd : class_dirs) ds.attribute_index(cd.filename().string());  // rejects unknown names
  for (std::size_t m = 0; m < ds.attributes.size(); ++m) {
    const auto cd = dir / ds.attributes[m];
    if (!std::filesystem::exists(cd)) continue;
    for (const auto& f : sorted_images(cd)) {
      Item it;
      it.id = std::string(to_string(split)) + "/" + ds.attributes[m] + "/" + f.stem().string();
      it.image = image_to_tensor(read_image(f));
      it.split = split;
      it.weak_label = m;
      ds.items.push_back(std::move(it));
    }
  }
}

}  // namespace detail

inline WeakDataset load_dataset(const std::filesystem::path& root) {
  WeakDataset ds;
  {
    std::ifstream is(root / "attributes.txt");
    if (!is) throw std::runtime_error("missing " + (root / "attributes.txt").string());
    std::string line;
    while (std::getline(is, line)) {
      line = detail::trim(line);
      if (!line.empty()) ds.attributes.push_back(line);
    }
  }
  detail::load_class_split(ds, root, Split::train);
  detail::load_class_split(ds, root, Split::val);

  const auto test_dir = root / "test";
  if (std::filesystem::exists(test_dir / "labels.csv")) {
    std::map<std::string, std::vector<std::size_t>> labels;
    std::ifstream is(test_dir / "labels.csv");
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
      if (detail::trim(line).empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw std::runtime_error("malformed labels.csv row: " + line);
      const auto id = detail::trim(line.substr(0, comma));
      const auto rest = detail::trim(line.substr(comma + 1));
      if (first && id == "image_id") {
        first = false;
        continue;
      }
      first = false;
      std::vector<std::size_t> set;
      std::stringstream ss(rest);
      std::string name;
      while (std::getline(ss, name, ';')) {
        name = detail::trim(name);
        if (!name.empty()) set.push_back(ds.attribute_index(name));
      }
      std::sort(set.begin(), set.end());
      set.erase(std::unique(set.begin(), set.end()), set.end());
      if (!labels.emplace(id, std::move(set)).second) throw std::runtime_error("duplicate labels.csv entry " + id);
    }
    std::set<std::string> seen;
    for (const auto& f : detail::sorted_images(test_dir / "images")) {
      const auto stem = f.stem().string();
      const auto it = labels.find(stem);
      if (it == labels.end()) throw std::runtime_error("test image " + stem + " has no labels.csv row");
      Item item;
      item.id = "test/" + stem;
      item.image = detail::image_to_tensor(read_image(f));
      item.split = Split::test;
      item.full_labels = it->second;
      ds.items.push_back(std::move(item));
      seen.insert(stem);
    }
    for (const auto& [id, _] : labels)
      if (!seen.count(id)) throw std::runtime_error("labels.csv names missing test image " + id);
  }
  ds.validate();
  return ds;
}

inline void write_dataset(const WeakDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  {
    std::ofstream os(root / "attributes.txt");
    for (const auto& a : ds.attributes) os << a << "\n";
  }
  const auto ext = ds.image_shape()[0] == 1 ? ".pgm" : ".png";
  std::ofstream labels;
  for (const auto& it : ds.items) {
    const auto slash = it.id.rfind('/');
    const auto stem = it.id.substr(slash + 1);
    fs::path path;
    if (it.split == Split::test) {
      fs::create_directories(root / "test" / "images");
      path = root / "test" / "images" / (stem + ext);
      if (!labels.is_open()) {
        labels.open(root / "test" / "labels.csv");
        labels << "image_id,labels\n";
      }
      labels << stem << ",";
      for (std::size_t k = 0; k < it.full_labels.size(); ++k) labels << (k ? ";" : "") << ds.attributes[it.full_labels[k]];
      labels << "\n";
    } else {
      const auto dir = root / to_string(it.split) / ds.attributes[*it.weak_label];
      fs::create_directories(dir);
      path = dir / (stem + ext);
    }
    write_image(path, detail::tensor_to_image(it.image));
  }
}

// Synthetic generator -------------------------------------------------------------

enum class MotifKind { stripes, blobs, checker, gradient };

inline const char* to_string(MotifKind k) {
  switch (k) {
    case MotifKind::stripes: return "stripes";
    case MotifKind::blobs: return "blobs";
    case MotifKind::checker: return "checker";
    case MotifKind::gradient: return "gradient";
  }
  return "?";
}

/// A full-frame texture. `orientation` is in radians, `period` in pixels.
struct Motif {
  MotifKind kind = MotifKind::stripes;
  double orientation = 0.0;
  double period = 6.0;
};

/// Default motif family: cycles through stripes, blobs, checker, gradient
/// and rotates/rescales on each further cycle.
inline std::vector<Motif> default_motifs(std::size_t m) {
  std::vector<Motif> out;
  constexpr MotifKind cycle[] = {MotifKind::stripes, MotifKind::blobs, MotifKind::checker, MotifKind::gradient};
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t round = i / 4;
    Motif mo;
    mo.kind = cycle[i % 4];
    mo.orientation = std::numbers::pi * (0.25 * static_cast<double>(round) + (i % 4 == 0 ? 0.0 : 0.5));
    mo.period = 6.0 + 2.0 * static_cast<double>(round);
    out.push_back(mo);
  }
  return out;
}

struct SynthSpec {
  std::size_t num_attributes = 4;
  std::size_t channels = 1;
  std::size_t image_size = 32;
  std::vector<std::string> names;  // defaults to motif-derived names
  std::vector<Motif> motifs;       // defaults to default_motifs(num_attributes)
  Tensor cooccurrence;             // [M,M], q(i,j) = P(motif j | drawn for class i); defaults to 0.4 off-diagonal
  double amplitude = 0.25;
  double noise = 0.1;
  double overlap = 0.0;  // chance a multi-motif train image is also filed under one of its other attributes
  std::uint64_t seed = 1;

  /// Fills defaults and checks the invariants q(i,i) = 1, q in [0,1].
  void resolve() {
    if (num_attributes == 0) throw std::invalid_argument("synthetic spec needs at least one attribute");
    if (channels != 1 && channels != 3) throw std::invalid_argument("synthetic images need 1 or 3 channels");
    if (image_size < 4) throw std::invalid_argument("synthetic image size must be >= 4");
    if (motifs.empty()) motifs = default_motifs(num_attributes);
    if (motifs.size() != num_attributes) throw std::invalid_argument("need one motif per attribute");
    if (names.empty()) {
      std::map<std::string, int> seen;
      for (const auto& mo : motifs) {
        std::string n = to_string(mo.kind);
        const int k = seen[n]++;
        names.push_back(k ? n + std::to_string(k + 1) : n);
      }
    }
    if (names.size() != num_attributes) throw std::invalid_argument("need one name per attribute");
    if (cooccurrence.empty()) {
      cooccurrence = Tensor::fill({num_attributes, num_attributes}, 0.4);
      for (std::size_t i = 0; i < num_attributes; ++i) cooccurrence.at(i, i) = 1.0;
    }
    if (cooccurrence.shape() != Shape{num_attributes, num_attributes})
      throw std::invalid_argument("co-occurrence matrix must be M x M");
    for (std::size_t i = 0; i < num_attributes; ++i) {
      if (cooccurrence.at(i, i) != 1.0) throw std::invalid_argument("co-occurrence diagonal must be 1");
      for (std::size_t j = 0; j < num_attributes; ++j)
        if (!(cooccurrence.at(i, j) >= 0.0 && cooccurrence.at(i, j) <= 1.0))
          throw std::invalid_argument("co-occurrence probabilities must lie in [0,1]");
    }
    if (!(overlap >= 0.0 && overlap <= 1.0)) throw std::invalid_argument("overlap must lie in [0,1]");
  }
};

struct SplitCounts {
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 50;
};

namespace detail {

// Texture in [0,1] for one motif; random phase/placement come from `rng`.
inline std::vector<double> render_motif(const Motif& mo, std::size_t size, Rng& rng) {
  std::vector<double> out(size * size, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  switch (mo.kind) {
    case MotifKind::stripes: {
      const double c = std::cos(mo.orientation), s = std::sin(mo.orientation), phase = rng.uniform(0.0, two_pi);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          out[y * size + x] = 0.5 + 0.5 * std::sin(two_pi * (c * x + s * y) / mo.period + phase);
      break;
    }
    case MotifKind::blobs: {
      const std::size_t count = std::max<std::size_t>(size * size / 48, 4);
      const double sigma = mo.period / 4.0;
      for (std::size_t k = 0; k < count; ++k) {
        const double cx = rng.uniform(0.0, static_cast<double>(size)), cy = rng.uniform(0.0, static_cast<double>(size));
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double dx = x - cx, dy = y - cy;
            out[y * size + x] += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          }
      }
      for (auto& v : out) v = std::min(v, 1.0);
      break;
    }
    case MotifKind::checker: {
      const double cell = mo.period / 2.0;
      const double ox = rng.uniform(0.0, mo.period), oy = rng.uniform(0.0, mo.period);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const auto cxi = static_cast<long>(std::floor((x + ox) / cell));
          const auto cyi = static_cast<long>(std::floor((y + oy) / cell));
          out[y * size + x] = ((cxi + cyi) % 2 == 0) ? 1.0 : 0.0;
        }
      break;
    }
    case MotifKind::gradient: {
      // smooth ramp across the frame in a random direction
      const double a = rng.uniform(0.0, two_pi), c = std::cos(a), s = std::sin(a);
      const double half = (static_cast<double>(size) - 1.0) / 2.0, span = half * std::sqrt(2.0);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          out[y * size + x] = 0.5 + 0.5 * ((x - half) * c + (y - half) * s) / span;
      break;
    }
  }
  return out;
}

// Per-motif channel tint for RGB output.
inline std::vector<double> motif_tint(std::size_t m, std::size_t channels) {
  if (channels == 1) return {1.0};
  static const double tints[][3] = {{1.0, 0.4, 0.4}, {0.4, 1.0, 0.4}, {0.4, 0.4, 1.0}, {1.0, 1.0, 0.3}, {0.3, 1.0, 1.0}, {1.0, 0.3, 1.0}};
  const auto& t = tints[m % 6];
  return {t[0], t[1], t[2]};
}

inline Tensor render_image(const SynthSpec& spec, const std::vector<std::size_t>& present, Rng& rng) {
  const std::size_t n = spec.image_size, ch = spec.channels;
  Tensor img = Tensor::fill({ch, n, n}, 0.5);
  for (auto m : present) {
    const auto tex = render_motif(spec.motifs[m], n, rng);
    const auto tint = motif_tint(m, ch);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < n * n; ++i) img[c * n * n + i] += spec.amplitude * tint[c] * (tex[i] - 0.5);
  }
  for (auto& v : img.data()) {
    v += spec.noise * rng.normal();
    // quantise to 8-bit levels so a write/load round trip is exact
    v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  }
  return img;
}

inline std::string pad6(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

}  // namespace detail

/// Draws a weakly labelled dataset. An image drawn for class i always shows
/// motif i and shows each other motif j independently with probability
/// q(i,j); train/val images keep only label i, test images keep the full set.
inline WeakDataset generate_synthetic(SynthSpec spec, const SplitCounts& counts) {
  spec.resolve();
  const std::size_t m_count = spec.num_attributes;
  WeakDataset ds;
  ds.attributes = spec.names;
  Rng rng(spec.seed);
  std::size_t test_serial = 0;
  for (Split split : {Split::train, Split::val, Split::test}) {
    const std::size_t per_class = split == Split::train ? counts.train_per_class
                                  : split == Split::val ? counts.val_per_class
                                                        : counts.test_per_class;
    for (std::size_t cls = 0; cls < m_count; ++cls)
      for (std::size_t k = 0; k < per_class; ++k) {
        Rng local = rng.split();
        std::vector<std::size_t> present;
        for (std::size_t j = 0; j < m_count; ++j)
          if (j == cls || local.bernoulli(spec.cooccurrence.at(cls, j))) present.push_back(j);
        Tensor image = detail::render_image(spec, present, local);
        Item it;
        it.split = split;
        if (split == Split::test) {
          it.id = "test/t" + detail::pad6(test_serial++);
          it.full_labels = present;
          it.image = std::move(image);
          ds.items.push_back(std::move(it));
          continue;
        }
        const std::string stem = detail::pad6(k);
        it.id = std::string(to_string(split)) + "/" + spec.names[cls] + "/" + stem;
        it.weak_label = cls;
        it.image = image;
        const bool dup = split == Split::train && spec.overlap > 0.0 && present.size() > 1 && local.bernoulli(spec.overlap);
        ds.items.push_back(it);
        if (dup) {
          std::vector<std::size_t> others;
          for (auto j : present)
            if (j != cls) others.push_back(j);
          const auto j = others[static_cast<std::size_t>(local.uniform_int(others.size()))];
          Item copy = it;
          copy.weak_label = j;
          copy.id = "train/" + spec.names[j] + "/x" + spec.names[cls] + "_" + stem;
          ds.items.push_back(std::move(copy));
        }
      }
  }
  // canonical order, identical to what load_dataset produces
  std::stable_sort(ds.items.begin(), ds.items.end(), [](const Item& a, const Item& b) {
    const auto key = [](const Item& it) {
      return std::make_tuple(static_cast<int>(it.split), it.weak_label.value_or(0), it.id.substr(it.id.rfind('/') + 1));
    };
    return key(a) < key(b);
  });
  ds.validate();
  return ds;
}

}  // namespace deepcarve
