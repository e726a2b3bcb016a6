#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deepcarve/carve.hpp"
#include "deepcarve/config.hpp"
#include "deepcarve/data.hpp"
#include "deepcarve/eval.hpp"
#include "deepcarve/parallel.hpp"
#include "deepcarve/train.hpp"

namespace deepcarve {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline FlatConfig load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  FlatConfig cfg = path.empty() ? FlatConfig{} : FlatConfig::load(path);
  for (const auto& kv : overrides) cfg.apply_override(kv);
  return cfg;
}

inline std::string fmt(double v, const char* f = "%.4f") {
  char buf[40];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline void check_outputs(const Network& net, const WeakDataset& ds) {
  if (net.num_outputs() != ds.num_classes())
    throw std::runtime_error("checkpoint network has " + std::to_string(net.num_outputs()) + " outputs but the dataset has " +
                             std::to_string(ds.num_classes()) + " attributes");
  if (net.input_shape() != ds.image_shape())
    throw std::runtime_error("checkpoint expects images of shape " + shape_string(net.input_shape()) + ", dataset has " +
                             shape_string(ds.image_shape()));
}

}  // namespace detail

/// Entry point for the `deepcarve` tool. Returns 0 on success, 1 on usage or
/// configuration errors and 2 when a stage fails at runtime.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Weakly supervised multi-label attribute learning with pseudo-label carving", "deepcarve"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);

  std::string spec_path, config_path, data_dir, out_path, run_dir, checkpoint, resume_from, layer = "conv1";
  std::vector<std::string> overrides;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic weakly labelled dataset");
  gen->add_option("--spec", spec_path, "Generator config file")->required();
  gen->add_option("--out", out_path, "Output dataset directory")->required();
  gen->add_option("--set", overrides, "Override a config key (key=value)");

  auto* tr = app.add_subcommand("train", "Train a network");
  tr->add_option("--config", config_path, "Training config file")->required();
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--run-dir", run_dir, "Directory for checkpoints, metrics and pseudo-labels")->required();
  tr->add_option("--resume", resume_from, "Continue from this checkpoint");
  tr->add_option("--set", overrides, "Override a config key (key=value)");

  auto* ev = app.add_subcommand("eval", "Top-K precision on the test split");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--run-dir", run_dir, "Directory for report.json and per_image.csv")->required();

  auto* ci = app.add_subcommand("carve-inspect", "Dump the response histogram and pseudo-labels for a checkpoint");
  ci->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ci->add_option("--data", data_dir, "Dataset directory")->required();
  ci->add_option("--out", out_path, "Output directory")->required();
  ci->add_option("--config", config_path, "Training config supplying gamma and label encoding");
  ci->add_option("--set", overrides, "Override a config key (key=value)");

  auto* ex = app.add_subcommand("export-filters", "Write a conv layer's filters as an image grid");
  ex->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ex->add_option("--layer", layer, "Conv layer id (conv1, conv2, ...) or layer index")->capture_default_str();
  ex->add_option("--out", out_path, "Output .pgm/.ppm/.png file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_num_threads(threads);

    if (*gen) {
      const FlatConfig raw = detail::load_with_overrides(spec_path, overrides);
      auto [spec, counts] = synth_spec_from(raw);
      const WeakDataset ds = generate_synthetic(spec, counts);
      write_dataset(ds, out_path);
      detail::write_text(std::filesystem::path(out_path) / "generator.cfg", synth_config_dump(spec, counts).dump());
      const auto cm = cooccurrence(ds, Split::test);
      write_cooccurrence_csv(std::filesystem::path(out_path) / "cooccurrence_test.csv", cm, ds.attributes);
      out << "wrote " << ds.items.size() << " images (" << ds.num_classes() << " attributes) to " << out_path << "\n";
      return kExitOk;
    }

    if (*tr) {
      const FlatConfig resolved = resolve_train_config(detail::load_with_overrides(config_path, overrides));
      TrainConfig config = train_config_from(resolved);
      config.run_dir = run_dir;
      const WeakDataset ds = load_dataset(data_dir);
      detail::write_text(std::filesystem::path(run_dir) / "config.cfg", resolved.dump());
      TrainHooks hooks;
      hooks.on_epoch = [&](const MetricRow& r) {
        out << "epoch " << r.epoch << " " << r.phase << " loss " << detail::fmt(r.loss) << " val "
            << detail::fmt(r.val_precision) << "\n";
      };
      hooks.on_carve = [&](const ResponseHistogram&, const PseudoLabelSet& set, std::size_t epoch) {
        out << "carve " << set.iteration << " after epoch " << epoch << "\n";
      };
      const NetworkSpec spec = network_spec_from(resolved, ds.image_shape(), ds.num_classes());
      Network net;
      if (resume_from.empty()) {
        Rng init = init_rng(config.seed);
        net = build_network(spec, init);
        train(ds, net, config, hooks);
      } else {
        net = resume(resume_from, ds, config, hooks, spec_hash(spec)).first;
      }
      if (!ds.indices(Split::test).empty()) {
        const auto rep = evaluate(net, ds);
        write_report(run_dir, rep, ds.attributes);
        out << "test precision " << detail::fmt(rep.mean_precision) << "\n";
      }
      return kExitOk;
    }

    if (*ev) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const WeakDataset ds = load_dataset(data_dir);
      detail::check_outputs(ck.net, ds);
      const auto rep = evaluate(ck.net, ds);
      write_report(run_dir, rep, ds.attributes);
      out << "test precision " << detail::fmt(rep.mean_precision) << " over " << rep.records.size() << " images\n";
      return kExitOk;
    }

    if (*ci) {
      const FlatConfig resolved = resolve_train_config(detail::load_with_overrides(config_path, overrides));
      const TrainConfig config = train_config_from(resolved);
      const Checkpoint ck = load_checkpoint(checkpoint);
      const WeakDataset ds = load_dataset(data_dir);
      detail::check_outputs(ck.net, ds);
      const auto [hist, set] = carve(ck.net, ds, config.carve_params(), ck.state.carve_iteration() + 1);
      const std::filesystem::path dir = out_path;
      std::filesystem::create_directories(dir);
      write_histogram_csv(dir / "histogram.csv", hist, ds.attributes);
      write_pseudo_labels_csv(dir / "pseudo_labels.csv", set);
      detail::write_text(dir / "config.cfg", resolved.dump());
      out << "wrote histogram (" << hist.num_maps() << " feature maps) and " << set.labels.dim(0) << " pseudo-label rows to "
          << dir.string() << "\n";
      return kExitOk;
    }

    if (*ex) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      export_filter_grid(ck.net, layer, out_path);
      out << "wrote " << out_path << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace deepcarve
