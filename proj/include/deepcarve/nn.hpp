#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "deepcarve/hash.hpp"
#include "deepcarve/parallel.hpp"
#include "deepcarve/rng.hpp"
#include "deepcarve/tensor.hpp"

namespace deepcarve {

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct ReluSpec {};

struct MaxPoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
};

struct FullyConnectedSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
};

struct DropoutSpec {
  double keep_prob = 0.5;
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, MaxPoolSpec, FullyConnectedSpec, DropoutSpec>;

/// Per-sample input shape plus the ordered layer stack.
struct NetworkSpec {
  Shape input_shape;
  std::vector<LayerSpec> layers;
};

enum class Mode { train, inference };

inline std::string to_string(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        std::ostringstream os;
        if constexpr (std::is_same_v<T, ConvSpec>) {
          os << "conv " << s.in_channels << " " << s.out_channels << " " << s.kernel << " " << s.stride
             << " " << s.padding;
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          os << "relu";
        } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
          os << "maxpool " << s.window << " " << s.stride;
        } else if constexpr (std::is_same_v<T, FullyConnectedSpec>) {
          os << "fc " << s.in_dim << " " << s.out_dim;
        } else {
          os.precision(17);
          os << "dropout " << s.keep_prob;
        }
        return os.str();
      },
      spec);
}

/// Canonical one-line-per-item text form; round-trips through parse_network_spec.
inline std::string describe(const NetworkSpec& spec) {
  std::string out = "input";
  for (auto d : spec.input_shape) out += " " + std::to_string(d);
  out += "\n";
  for (const auto& l : spec.layers) out += to_string(l) + "\n";
  return out;
}

inline std::uint64_t spec_hash(const NetworkSpec& spec) { return fnv1a(describe(spec)); }

inline NetworkSpec parse_network_spec(const std::string& text) {
  NetworkSpec spec;
  std::istringstream lines(text);
  std::string line;
  bool have_input = false;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "input") {
      std::size_t d;
      while (is >> d) spec.input_shape.push_back(d);
      have_input = true;
    } else if (kind == "conv") {
      ConvSpec c;
      is >> c.in_channels >> c.out_channels >> c.kernel >> c.stride >> c.padding;
      spec.layers.emplace_back(c);
    } else if (kind == "relu") {
      spec.layers.emplace_back(ReluSpec{});
    } else if (kind == "maxpool") {
      MaxPoolSpec p;
      is >> p.window >> p.stride;
      spec.layers.emplace_back(p);
    } else if (kind == "fc") {
      FullyConnectedSpec f;
      is >> f.in_dim >> f.out_dim;
      spec.layers.emplace_back(f);
    } else if (kind == "dropout") {
      DropoutSpec d;
      is >> d.keep_prob;
      spec.layers.emplace_back(d);
    } else {
      throw std::runtime_error("unknown layer kind '" + kind + "' in network spec");
    }
    if (is.fail() && !is.eof()) throw std::runtime_error("malformed network spec line: " + line);
  }
  if (!have_input) throw std::runtime_error("network spec has no input line");
  return spec;
}

/// Output shape of one layer for a given per-sample input shape. Throws with
/// the offending layer index when the shapes do not chain.
inline Shape layer_output_shape(const LayerSpec& spec, const Shape& in, std::size_t index) {
  const auto fail = [&](const std::string& why) {
    throw std::invalid_argument("layer " + std::to_string(index) + " (" + to_string(spec) +
                                ") cannot follow output shape " + shape_string(in) + ": " + why);
  };
  return std::visit(
      [&](const auto& s) -> Shape {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ConvSpec>) {
          if (s.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0)
            fail("conv dimensions must be positive");
          if (in.size() != 3) fail("conv expects a [C,H,W] input");
          if (in[0] != s.in_channels) fail("channel count mismatch");
          if (in[1] + 2 * s.padding < s.kernel || in[2] + 2 * s.padding < s.kernel) fail("kernel larger than input");
          return {s.out_channels, (in[1] + 2 * s.padding - s.kernel) / s.stride + 1,
                  (in[2] + 2 * s.padding - s.kernel) / s.stride + 1};
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          return in;
        } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
          if (s.window == 0 || s.stride == 0) fail("pool window and stride must be positive");
          if (in.size() != 3) fail("maxpool expects a [C,H,W] input");
          if (in[1] < s.window || in[2] < s.window) fail("pool window larger than input");
          return {in[0], (in[1] - s.window) / s.stride + 1, (in[2] - s.window) / s.stride + 1};
        } else if constexpr (std::is_same_v<T, FullyConnectedSpec>) {
          if (s.in_dim == 0 || s.out_dim == 0) fail("fc dimensions must be positive");
          if (shape_size(in) != s.in_dim) fail("fc in_dim " + std::to_string(s.in_dim) + " != flattened input");
          return {s.out_dim};
        } else {
          if (!(s.keep_prob > 0.0 && s.keep_prob <= 1.0)) fail("keep probability must be in (0,1]");
          return in;
        }
      },
      spec);
}

struct Layer {
  LayerSpec spec;
  Shape in_shape;
  Shape out_shape;
  Tensor weight;  // empty for parameterless layers
  Tensor bias;

  bool has_params() const { return !weight.empty(); }
  bool is_conv() const { return std::holds_alternative<ConvSpec>(spec); }
};

/// A probe on a conv layer's post-activation output: the output of the
/// following relu when there is one, else the conv output itself.
struct ConvTap {
  std::string id;
  std::size_t conv_layer = 0;
  std::size_t output_layer = 0;
  std::size_t channels = 0;
};

class Network {
 public:
  Network() = default;

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<ConvTap>& conv_taps() const { return taps_; }
  const Shape& input_shape() const { return spec_.input_shape; }
  std::size_t num_outputs() const { return shape_size(layers_.back().out_shape); }

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  /// Bumped on every mutable parameter access; traces remember the value they
  /// were produced under.
  std::uint64_t generation() const { return generation_; }

  /// Parameter tensors in layer order (weight then bias).
  std::vector<Tensor*> parameters() {
    ++generation_;
    std::vector<Tensor*> out;
    for (auto& l : layers_)
      if (l.has_params()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_)
      if (l.has_params()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    return out;
  }

  std::size_t total_feature_maps() const {
    std::size_t n = 0;
    for (const auto& t : taps_) n += t.channels;
    return n;
  }

  const ConvTap& tap(const std::string& id) const {
    for (const auto& t : taps_)
      if (t.id == id) return t;
    throw std::invalid_argument("no conv layer named '" + id + "'");
  }

  friend Network build_network(const NetworkSpec& spec, Rng& rng);
  friend Network make_network(const NetworkSpec& spec);

 private:
  NetworkSpec spec_;
  std::vector<Layer> layers_;
  std::vector<ConvTap> taps_;
  Mode mode_ = Mode::train;
  std::uint64_t generation_ = 0;
};

/// Allocates a network with zero parameters after validating the shape chain.
inline Network make_network(const NetworkSpec& spec) {
  if (spec.layers.empty()) throw std::invalid_argument("network needs at least one layer");
  Network net;
  net.spec_ = spec;
  Shape shape = spec.input_shape;
  if (shape.empty()) throw std::invalid_argument("network input shape is empty");
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("network input shape " + shape_string(shape) + " has a zero dimension");
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    Layer layer;
    layer.spec = spec.layers[i];
    layer.in_shape = shape;
    layer.out_shape = layer_output_shape(layer.spec, shape, i);
    if (const auto* c = std::get_if<ConvSpec>(&layer.spec)) {
      layer.weight = Tensor::zeros({c->out_channels, c->in_channels * c->kernel * c->kernel});
      layer.bias = Tensor::zeros({c->out_channels});
    } else if (const auto* f = std::get_if<FullyConnectedSpec>(&layer.spec)) {
      layer.weight = Tensor::zeros({f->out_dim, f->in_dim});
      layer.bias = Tensor::zeros({f->out_dim});
    }
    shape = layer.out_shape;
    net.layers_.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < net.layers_.size(); ++i) {
    if (!net.layers_[i].is_conv()) continue;
    ConvTap tap;
    tap.id = "conv" + std::to_string(net.taps_.size() + 1);
    tap.conv_layer = i;
    tap.output_layer = i;
    if (i + 1 < net.layers_.size() && std::holds_alternative<ReluSpec>(net.layers_[i + 1].spec)) tap.output_layer = i + 1;
    tap.channels = net.layers_[i].out_shape[0];
    net.taps_.push_back(tap);
  }
  return net;
}

/// He-scaled Gaussian weights, zero biases.
inline Network build_network(const NetworkSpec& spec, Rng& rng) {
  Network net = make_network(spec);
  for (auto& l : net.layers_) {
    if (!l.has_params()) continue;
    const double fan_in = static_cast<double>(l.weight.dim(1));
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& w : l.weight.data()) w = rng.normal(0.0, stddev);
  }
  return net;
}

// Architecture presets -------------------------------------------------------

/// Three conv+relu+maxpool blocks, then fc-relu-dropout-fc. Expects a square
/// input whose side is divisible by 8.
inline NetworkSpec mini_alexnet_spec(const Shape& input, std::size_t num_classes, std::size_t width = 8) {
  if (input.size() != 3) throw std::invalid_argument("mini-alexnet expects a [C,H,W] input");
  NetworkSpec s{input, {}};
  s.layers = {
      ConvSpec{input[0], width, 5, 1, 2},  ReluSpec{}, MaxPoolSpec{2, 2},
      ConvSpec{width, 2 * width, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2, 2},
      ConvSpec{2 * width, 2 * width, 3, 1, 1}, ReluSpec{}, MaxPoolSpec{2, 2},
  };
  const std::size_t flat = 2 * width * (input[1] / 8) * (input[2] / 8);
  s.layers.push_back(FullyConnectedSpec{flat, 8 * width});
  s.layers.push_back(ReluSpec{});
  s.layers.push_back(DropoutSpec{0.5});
  s.layers.push_back(FullyConnectedSpec{8 * width, num_classes});
  return s;
}

/// The eight-layer AlexNet layout (five conv, three fc) without local
/// response normalization. Channel and fc widths are divided by
/// `width_divisor`; with divisor 1 and a 3x227x227 input this is full size.
inline NetworkSpec alexnet_spec(const Shape& input, std::size_t num_classes, std::size_t width_divisor = 1) {
  if (input.size() != 3) throw std::invalid_argument("alexnet expects a [C,H,W] input");
  const auto w = [&](std::size_t n) { return std::max<std::size_t>(n / width_divisor, 1); };
  NetworkSpec s{input, {}};
  s.layers = {
      ConvSpec{input[0], w(96), 11, 4, 2}, ReluSpec{}, MaxPoolSpec{3, 2},
      ConvSpec{w(96), w(256), 5, 1, 2},    ReluSpec{}, MaxPoolSpec{3, 2},
      ConvSpec{w(256), w(384), 3, 1, 1},   ReluSpec{},
      ConvSpec{w(384), w(384), 3, 1, 1},   ReluSpec{},
      ConvSpec{w(384), w(256), 3, 1, 1},   ReluSpec{}, MaxPoolSpec{3, 2},
  };
  Shape shape = input;
  for (std::size_t i = 0; i < s.layers.size(); ++i) shape = layer_output_shape(s.layers[i], shape, i);
  s.layers.push_back(FullyConnectedSpec{shape_size(shape), w(4096)});
  s.layers.push_back(ReluSpec{});
  s.layers.push_back(DropoutSpec{0.5});
  s.layers.push_back(FullyConnectedSpec{w(4096), w(4096)});
  s.layers.push_back(ReluSpec{});
  s.layers.push_back(DropoutSpec{0.5});
  s.layers.push_back(FullyConnectedSpec{w(4096), num_classes});
  return s;
}

/// Parses a compact layer list with inferred input dims, e.g.
/// "conv:8:5:1:2 relu maxpool:2:2 fc:64 relu dropout:0.5 fc". A trailing
/// "fc" without a width produces `num_classes` outputs. Presets
/// "mini-alexnet[:width]" and "alexnet[:width_divisor]" are also accepted.
inline NetworkSpec parse_architecture(const std::string& arch, const Shape& input, std::size_t num_classes) {
  const auto preset_arg = [&](const std::string& name) -> std::optional<std::size_t> {
    if (arch.rfind(name + ":", 0) != 0) return std::nullopt;
    const std::string v = arch.substr(name.size() + 1);
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || std::stoul(v) == 0)
      throw std::invalid_argument("bad preset argument in '" + arch + "'");
    return std::stoul(v);
  };
  if (arch == "mini-alexnet") return mini_alexnet_spec(input, num_classes);
  if (arch == "alexnet") return alexnet_spec(input, num_classes);
  if (auto w = preset_arg("mini-alexnet")) return mini_alexnet_spec(input, num_classes, *w);
  if (auto d = preset_arg("alexnet")) return alexnet_spec(input, num_classes, *d);
  NetworkSpec s{input, {}};
  std::string text = arch;
  for (auto& c : text)
    if (c == ',' || c == ';') c = ' ';
  std::istringstream is(text);
  std::string tok;
  Shape shape = input;
  const auto fields = [](const std::string& t) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
      const auto pos = t.find(':', start);
      out.push_back(t.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return out;
  };
  const auto num = [&](const std::string& v, const std::string& t) -> std::size_t {
    try {
      std::size_t used = 0;
      const auto n = std::stoul(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw std::invalid_argument("bad number '" + v + "' in layer token '" + t + "'");
    }
  };
  while (is >> tok) {
    const auto f = fields(tok);
    LayerSpec layer;
    if (f[0] == "conv" && f.size() >= 3 && f.size() <= 5) {
      if (shape.size() != 3) throw std::invalid_argument("conv token '" + tok + "' needs a [C,H,W] input");
      ConvSpec c{shape[0], num(f[1], tok), num(f[2], tok), 1, 0};
      if (f.size() > 3) c.stride = num(f[3], tok);
      if (f.size() > 4) c.padding = num(f[4], tok);
      layer = c;
    } else if (f[0] == "relu" && f.size() == 1) {
      layer = ReluSpec{};
    } else if (f[0] == "maxpool" && f.size() >= 2 && f.size() <= 3) {
      MaxPoolSpec p{num(f[1], tok), num(f[1], tok)};
      if (f.size() > 2) p.stride = num(f[2], tok);
      layer = p;
    } else if (f[0] == "fc" && f.size() <= 2) {
      layer = FullyConnectedSpec{shape_size(shape), f.size() == 2 ? num(f[1], tok) : num_classes};
    } else if (f[0] == "dropout" && f.size() == 2) {
      try {
        layer = DropoutSpec{std::stod(f[1])};
      } catch (const std::exception&) {
        throw std::invalid_argument("bad keep probability in '" + tok + "'");
      }
    } else {
      throw std::invalid_argument("unrecognised layer token '" + tok + "'");
    }
    shape = layer_output_shape(layer, shape, s.layers.size());
    s.layers.push_back(layer);
  }
  if (s.layers.empty()) throw std::invalid_argument("empty architecture string");
  return s;
}

// Forward / backward -----------------------------------------------------------

struct SampleTrace {
  std::vector<Tensor> activations;                 // [0] is the input, [i+1] the output of layer i
  std::vector<std::vector<std::size_t>> argmax;    // maxpool layers only
  std::vector<Tensor> masks;                       // dropout layers in train mode only
};

struct ForwardTrace {
  std::uint64_t generation = 0;
  Mode mode = Mode::inference;
  std::vector<ConvTap> taps;
  std::vector<SampleTrace> samples;

  std::size_t batch_size() const { return samples.size(); }

  /// Post-activation feature maps [C,H,W] of a tap for one image.
  const Tensor& feature_maps(std::size_t image, std::size_t tap) const {
    return samples.at(image).activations.at(taps.at(tap).output_layer + 1);
  }
};

struct ForwardResult {
  Tensor logits;  // [B, M]
  ForwardTrace trace;
};

struct Gradients {
  std::vector<Tensor> weight;  // per layer; empty for parameterless layers
  std::vector<Tensor> bias;
  Tensor input;                // [B, ...] or empty when not requested

  /// Non-empty gradient tensors in Network::parameters() order.
  std::vector<const Tensor*> flat() const {
    std::vector<const Tensor*> out;
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!weight[i].empty()) {
        out.push_back(&weight[i]);
        out.push_back(&bias[i]);
      }
    return out;
  }
};

namespace detail {

inline void im2col(const Tensor& in, const ConvSpec& c, std::size_t out_h, std::size_t out_w, std::vector<double>& cols) {
  const std::size_t h = in.dim(1), w = in.dim(2), k = c.kernel;
  const std::size_t plane = out_h * out_w;
  cols.assign(c.in_channels * k * k * plane, 0.0);
  const double* src = in.data().data();
  for (std::size_t ch = 0; ch < c.in_channels; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols.data() + ((ch * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - static_cast<std::ptrdiff_t>(c.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * out_w + ox] = src[(ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
}

inline void col2im(const std::vector<double>& cols, const ConvSpec& c, std::size_t out_h, std::size_t out_w, Tensor& dx) {
  const std::size_t h = dx.dim(1), w = dx.dim(2), k = c.kernel;
  const std::size_t plane = out_h * out_w;
  double* dst = dx.data().data();
  for (std::size_t ch = 0; ch < c.in_channels; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols.data() + ((ch * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - static_cast<std::ptrdiff_t>(c.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[(ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * out_w + ox];
          }
        }
      }
}

inline void forward_sample(const Network& net, Tensor input, Mode mode, Rng* rng, SampleTrace& st) {
  const auto& layers = net.layers();
  st.activations.clear();
  st.activations.reserve(layers.size() + 1);
  st.activations.push_back(std::move(input));
  st.argmax.assign(layers.size(), {});
  st.masks.assign(layers.size(), Tensor{});
  std::vector<double> cols;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const Layer& layer = layers[li];
    const Tensor& x = st.activations.back();
    Tensor y(layer.out_shape);
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            const std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2], plane = oh * ow;
            im2col(x, s, oh, ow, cols);
            double* out = y.data().data();
            for (std::size_t o = 0; o < s.out_channels; ++o)
              std::fill(out + o * plane, out + (o + 1) * plane, layer.bias[o]);
            gemm_nn(s.out_channels, plane, layer.weight.dim(1), layer.weight.data().data(), cols.data(), out);
          } else if constexpr (std::is_same_v<T, ReluSpec>) {
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
            const std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2];
            auto& arg = st.argmax[li];
            arg.resize(y.size());
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  std::size_t best = (c * h + oy * s.stride) * w + ox * s.stride;
                  for (std::size_t ky = 0; ky < s.window; ++ky)
                    for (std::size_t kx = 0; kx < s.window; ++kx) {
                      const std::size_t idx = (c * h + oy * s.stride + ky) * w + ox * s.stride + kx;
                      if (x[idx] > x[best]) best = idx;  // first maximum wins ties
                    }
                  const std::size_t o = (c * oh + oy) * ow + ox;
                  arg[o] = best;
                  y[o] = x[best];
                }
          } else if constexpr (std::is_same_v<T, FullyConnectedSpec>) {
            const double* wt = layer.weight.data().data();
            for (std::size_t o = 0; o < s.out_dim; ++o) {
              double acc = layer.bias[o];
              const double* row = wt + o * s.in_dim;
              for (std::size_t i = 0; i < s.in_dim; ++i) acc += row[i] * x[i];
              y[o] = acc;
            }
          } else {
            if (mode == Mode::train && s.keep_prob < 1.0) {
              Tensor mask(layer.out_shape);
              const double inv = 1.0 / s.keep_prob;
              for (auto& m : mask.data()) m = rng->bernoulli(s.keep_prob) ? inv : 0.0;
              for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i];
              st.masks[li] = std::move(mask);
            } else {
              y = x;
            }
          }
        },
        layer.spec);
    st.activations.push_back(std::move(y));
  }
}

}  // namespace detail

/// Runs a batch [B, ...input_shape] through the network in the given mode.
/// In train mode each image draws its own dropout stream from `rng` (one split
/// per image, in batch order); inference mode leaves `rng` untouched.
inline ForwardResult forward(const Network& net, const Tensor& batch, Rng& rng, Mode mode) {
  Shape expect{0};
  expect.insert(expect.end(), net.input_shape().begin(), net.input_shape().end());
  const Shape& got = batch.shape();
  if (got.size() != expect.size() || !std::equal(got.begin() + 1, got.end(), expect.begin() + 1)) {
    expect[0] = got.empty() ? 0 : got[0];
    throw std::invalid_argument("forward: batch shape " + shape_string(got) + " does not match network input " +
                                shape_string(expect));
  }
  const std::size_t b = batch.dim(0);
  std::vector<Rng> streams;
  if (mode == Mode::train) {
    streams.reserve(b);
    for (std::size_t i = 0; i < b; ++i) streams.push_back(rng.split());
  }
  ForwardResult res;
  res.trace.generation = net.generation();
  res.trace.mode = mode;
  res.trace.taps = net.conv_taps();
  res.trace.samples.resize(b);
  parallel_for(b, [&](std::size_t i) {
    const auto src = batch.slice(i);
    Tensor input(net.input_shape(), std::vector<double>(src.begin(), src.end()));
    detail::forward_sample(net, std::move(input), mode, mode == Mode::train ? &streams[i] : nullptr,
                           res.trace.samples[i]);
  });
  const std::size_t m = net.num_outputs();
  res.logits = Tensor::zeros({b, m});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& out = res.trace.samples[i].activations.back();
    std::copy(out.data().begin(), out.data().end(), res.logits.slice(i).begin());
  }
  detail::debug_check_finite(res.logits, "forward");
  return res;
}

/// Forward in the network's current mode.
inline ForwardResult forward(const Network& net, const Tensor& batch, Rng& rng) {
  return forward(net, batch, rng, net.mode());
}

/// Inference-mode logits.
inline Tensor predict(const Network& net, const Tensor& batch) {
  Rng unused;
  return forward(net, batch, unused, Mode::inference).logits;
}

/// Backpropagates dLogits [B, M] through a trace from the same parameters.
/// Parameter gradients are summed over the batch in image order.
inline Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& dlogits,
                          bool need_input_grad = true) {
  const auto& layers = net.layers();
  if (trace.generation != net.generation())
    throw std::logic_error("backward: trace was produced under different parameters (stale trace)");
  if (dlogits.rank() != 2 || dlogits.dim(0) != trace.batch_size() || dlogits.dim(1) != net.num_outputs())
    throw std::invalid_argument("backward: dLogits shape " + shape_string(dlogits.shape()) + " does not match batch " +
                                std::to_string(trace.batch_size()) + " x " + std::to_string(net.num_outputs()));
  for (const auto& s : trace.samples)
    if (s.activations.size() != layers.size() + 1) throw std::logic_error("backward: trace does not match network depth");

  const std::size_t b = trace.batch_size();
  struct SampleGrads {
    std::vector<Tensor> w, bias;
    Tensor input;
  };
  std::vector<SampleGrads> per(b);
  parallel_for(b, [&](std::size_t n) {
    const SampleTrace& st = trace.samples[n];
    SampleGrads& g = per[n];
    g.w.resize(layers.size());
    g.bias.resize(layers.size());
    const auto src = dlogits.slice(n);
    Tensor dy(layers.back().out_shape, std::vector<double>(src.begin(), src.end()));
    std::vector<double> cols, dcols;
    for (std::size_t li = layers.size(); li-- > 0;) {
      const Layer& layer = layers[li];
      const Tensor& x = st.activations[li];
      const bool want_dx = li > 0 || need_input_grad;
      Tensor dx;
      if (want_dx) dx = Tensor::zeros(layer.in_shape);
      std::visit(
          [&](const auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, ConvSpec>) {
              const std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2], plane = oh * ow;
              const std::size_t ckk = layer.weight.dim(1);
              detail::im2col(x, s, oh, ow, cols);
              g.w[li] = Tensor::zeros(layer.weight.shape());
              g.bias[li] = Tensor::zeros(layer.bias.shape());
              detail::gemm_nt(s.out_channels, ckk, plane, dy.data().data(), cols.data(), g.w[li].data().data());
              for (std::size_t o = 0; o < s.out_channels; ++o)
                g.bias[li][o] = sum_all(dy.data().subspan(o * plane, plane));
              if (want_dx) {
                dcols.assign(ckk * plane, 0.0);
                detail::gemm_tn(ckk, plane, s.out_channels, layer.weight.data().data(), dy.data().data(), dcols.data());
                detail::col2im(dcols, s, oh, ow, dx);
              }
            } else if constexpr (std::is_same_v<T, ReluSpec>) {
              if (want_dx)
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
            } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
              if (want_dx) {
                const auto& arg = st.argmax[li];
                for (std::size_t i = 0; i < dy.size(); ++i) dx[arg[i]] += dy[i];
              }
            } else if constexpr (std::is_same_v<T, FullyConnectedSpec>) {
              g.w[li] = Tensor::zeros(layer.weight.shape());
              g.bias[li] = Tensor::zeros(layer.bias.shape());
              double* gw = g.w[li].data().data();
              for (std::size_t o = 0; o < s.out_dim; ++o) {
                const double d = dy[o];
                g.bias[li][o] = d;
                if (d == 0.0) continue;
                double* row = gw + o * s.in_dim;
                for (std::size_t i = 0; i < s.in_dim; ++i) row[i] = d * x[i];
              }
              if (want_dx) {
                const double* wt = layer.weight.data().data();
                for (std::size_t o = 0; o < s.out_dim; ++o) {
                  const double d = dy[o];
                  if (d == 0.0) continue;
                  const double* row = wt + o * s.in_dim;
                  for (std::size_t i = 0; i < s.in_dim; ++i) dx[i] += row[i] * d;
                }
              }
            } else {
              if (want_dx) {
                const Tensor& mask = st.masks[li];
                if (mask.empty())
                  dx = dy.reshaped(layer.in_shape);
                else
                  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * mask[i];
              }
            }
          },
          layer.spec);
      if (!want_dx) break;
      dy = std::move(dx);
    }
    if (need_input_grad) g.input = std::move(dy);
  });

  Gradients out;
  out.weight.resize(layers.size());
  out.bias.resize(layers.size());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    if (!layers[li].has_params()) continue;
    out.weight[li] = Tensor::zeros(layers[li].weight.shape());
    out.bias[li] = Tensor::zeros(layers[li].bias.shape());
    for (std::size_t n = 0; n < b; ++n) {
      const auto& gw = per[n].w[li];
      const auto& gb = per[n].bias[li];
      for (std::size_t i = 0; i < gw.size(); ++i) out.weight[li][i] += gw[i];
      for (std::size_t i = 0; i < gb.size(); ++i) out.bias[li][i] += gb[i];
    }
  }
  if (need_input_grad) {
    Shape s{b};
    s.insert(s.end(), net.input_shape().begin(), net.input_shape().end());
    out.input = Tensor::zeros(s);
    for (std::size_t n = 0; n < b; ++n) {
      const auto src = per[n].input.data();
      std::copy(src.begin(), src.end(), out.input.slice(n).begin());
    }
  }
  return out;
}

/// Per-tap spatial means of every post-activation feature map.
struct TapResponses {
  std::string tap_id;
  Tensor values;  // [B, channels]
};

inline std::vector<TapResponses> extract_feature_responses(const ForwardTrace& trace) {
  std::vector<TapResponses> out;
  const std::size_t b = trace.batch_size();
  for (std::size_t t = 0; t < trace.taps.size(); ++t) {
    const std::size_t ch = trace.taps[t].channels;
    TapResponses r{trace.taps[t].id, Tensor::zeros({b, ch})};
    for (std::size_t n = 0; n < b; ++n) {
      const Tensor& maps = trace.feature_maps(n, t);
      const std::size_t plane = maps.size() / ch;
      for (std::size_t c = 0; c < ch; ++c) r.values.at(n, c) = spatial_mean(maps.data().subspan(c * plane, plane));
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Responses of all taps concatenated in network order: [B, total maps].
inline Tensor response_matrix(const ForwardTrace& trace) {
  const auto taps = extract_feature_responses(trace);
  std::size_t total = 0;
  for (const auto& t : taps) total += t.values.dim(1);
  if (total == 0) throw std::invalid_argument("network has no conv feature maps");
  Tensor out = Tensor::zeros({trace.batch_size(), total});
  for (std::size_t n = 0; n < trace.batch_size(); ++n) {
    std::size_t col = 0;
    for (const auto& t : taps)
      for (std::size_t c = 0; c < t.values.dim(1); ++c) out.at(n, col++) = t.values.at(n, c);
  }
  return out;
}

// Checkpoint section ----------------------------------------------------------
// "CVNET1", u64 spec hash, u32 spec length, spec text, u32 tensor count,
// tensor blobs (weight, bias per parameterised layer).

inline void write_network(std::ostream& os, const Network& net) {
  const std::string text = describe(net.spec());
  os.write("CVNET1", 6);
  detail::write_u64(os, fnv1a(text));
  detail::write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = net.parameters();
  detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) write_tensor(os, *p);
}

/// Reads a network section. When `expected_hash` is non-zero the stored spec
/// must hash to it.
inline Network read_network(std::istream& is, std::uint64_t expected_hash = 0) {
  unsigned char magic[6];
  detail::read_exact(is, magic, 6);
  if (std::memcmp(magic, "CVNET1", 6) != 0) throw std::runtime_error("not a network checkpoint (bad magic)");
  const std::uint64_t hash = detail::read_u64(is);
  const std::uint32_t len = detail::read_u32(is);
  if (len > (1u << 20)) throw std::runtime_error("network spec section too large");
  std::string text(len, '\0');
  detail::read_exact(is, reinterpret_cast<unsigned char*>(text.data()), len);
  if (fnv1a(text) != hash) throw std::runtime_error("network spec hash does not match its text (corrupt checkpoint)");
  if (expected_hash != 0 && hash != expected_hash)
    throw std::runtime_error("checkpoint architecture does not match the configured network (spec hash mismatch)");
  Network net = make_network(parse_network_spec(text));
  const std::uint32_t count = detail::read_u32(is);
  auto params = net.parameters();
  if (count != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto* p : params) {
    Tensor t = read_tensor(is);
    if (t.shape() != p->shape())
      throw std::runtime_error("checkpoint tensor shape " + shape_string(t.shape()) + " != expected " +
                               shape_string(p->shape()));
    *p = std::move(t);
  }
  return net;
}

}  // namespace deepcarve
