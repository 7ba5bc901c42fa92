// mlcaps: train, evaluate and inspect hierarchical capsule classifiers.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mlcaps/checkpoint.hpp"
#include "mlcaps/config.hpp"
#include "mlcaps/data.hpp"
#include "mlcaps/hierarchy.hpp"
#include "mlcaps/model.hpp"
#include "mlcaps/report.hpp"
#include "mlcaps/train.hpp"

namespace fs = std::filesystem;
using namespace mlcaps;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr const char* kConfigFile = "config.cfg";
constexpr const char* kHierarchyCopy = "hierarchy.hier";

struct Common {
  std::string dataset;
  std::string data_dir = "data";
  std::string hierarchy_file;
  std::string config_file;
  std::string profile;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& o) {
  cmd->add_option("--dataset", o.dataset, "mnist, fashion-mnist, cifar10 or cifar100");
  cmd->add_option("--data-dir", o.data_dir, "data root holding one subdirectory per dataset")->capture_default_str();
  cmd->add_option("--hierarchy-file", o.hierarchy_file, "label tree file (default: the bundled tree)");
  cmd->add_option("--config", o.config_file, "key = value config file");
  cmd->add_option("--profile", o.profile, "full, reduced or tiny");
  cmd->add_option("--set", o.overrides, "override one config key, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "random seed");
}

RunConfig resolve_config(const Common& o, const fs::path& fallback_config = {}) {
  Settings settings;
  if (!o.config_file.empty()) settings = load_settings(o.config_file);
  else if (!fallback_config.empty() && fs::exists(fallback_config)) settings = load_settings(fallback_config);

  RunConfig c;
  std::string file_dataset;
  for (const auto& [k, v] : settings)
    if (k == "dataset") file_dataset = v;
  if (!o.dataset.empty()) c.dataset = parse_dataset_kind(o.dataset);
  else if (!file_dataset.empty()) c.dataset = parse_dataset_kind(file_dataset);
  else throw config_error("no dataset given; pass --dataset or a --config naming one");
  if (!file_dataset.empty() && parse_dataset_kind(file_dataset) != c.dataset)
    throw config_error("config is for dataset '" + file_dataset + "' but --dataset is '" + o.dataset + "'");
  std::string profile = o.profile;
  for (const auto& [k, v] : settings)
    if (k == "profile" && o.profile.empty()) profile = v;
  apply_profile(c, profile.empty() ? "full" : profile);
  for (const auto& [k, v] : settings)
    if (k != "dataset" && k != "profile") apply_setting(c, k, v);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + kv + "'");
    apply_setting(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.schedule.seed = *o.seed;
  return c;
}

LabelTree resolve_tree(const Common& o, const RunConfig& c, const fs::path& fallback = {}) {
  if (!o.hierarchy_file.empty()) return load_hierarchy(o.hierarchy_file);
  if (!fallback.empty() && fs::exists(fallback)) return load_hierarchy(fallback.string());
  return load_hierarchy((fs::path(MLCAPS_HIERARCHY_DIR) / default_hierarchy_file(c.dataset)).string());
}

Dataset resolve_dataset(const Common& o, const RunConfig& c, LabelTree tree) {
  try {
    return load_dataset(c.dataset, o.data_dir, std::move(tree), c.train_limit, c.test_limit);
  } catch (const missing_data_error& e) {
    std::string hint = c.dataset == DatasetKind::mnist
                           ? "run `python3 tools/fetch_mnist_subset.py --root " + o.data_dir + "`"
                           : "place the binary release under " + (fs::path(o.data_dir) / dataset_subdir(c.dataset)).string();
    throw missing_data_error(std::string(e.what()) + "\n  " + hint + ", or point --data-dir at an existing copy");
  }
}

fs::path out_path(const std::string& out_dir, const std::string& name) {
  fs::path p(name);
  if (p.is_absolute() || out_dir.empty()) return p;
  return fs::path(out_dir) / p;
}

int cmd_train(const Common& o, bool print_only) {
  RunConfig c = resolve_config(o);
  if (print_only) {
    write_config(std::cout, c);
    return 0;
  }
  LabelTree tree = resolve_tree(o, c);
  c.model = with_tree(c.model, tree);
  c.model.check();
  c.schedule.check(tree.depth());
  Dataset data = resolve_dataset(o, c, tree);
  if (data.train.channels != c.model.channels || data.train.height != c.model.height ||
      data.train.width != c.model.width)
    throw config_error("dataset images do not match the configured input shape");

  const fs::path out = o.out_dir.empty() ? fs::path("runs") / dataset_name(c.dataset) : fs::path(o.out_dir);
  fs::create_directories(out);
  std::ofstream(out / kConfigFile) << to_string(c);
  std::ofstream(out / kHierarchyCopy) << to_string(tree);

  Model<float> model(c.model, c.schedule.seed);
  std::cout << "dataset " << dataset_name(c.dataset) << ": " << data.train.count() << " train / "
            << data.test.count() << " test images, " << model.parameter_count() << " parameters\n";
  auto run = train_run(model, c.schedule, data, {out, &std::cout, {}});
  std::cout << "best fine test accuracy " << format_number(100.0 * run.best_fine_accuracy, "%.2f") << "% at epoch "
            << run.best_epoch << "\noutputs in " << out.string() << '\n';
  return 0;
}

struct LoadedRun {
  RunConfig config;
  Dataset data;
  Model<float> model;
};

LoadedRun load_run(const Common& o, const std::string& checkpoint) {
  if (checkpoint.empty()) throw config_error("--checkpoint is required");
  if (!fs::exists(checkpoint)) throw missing_data_error("checkpoint not found: " + checkpoint);
  const fs::path dir = fs::path(checkpoint).parent_path();
  RunConfig c = resolve_config(o, dir / kConfigFile);
  LabelTree tree = resolve_tree(o, c, dir / kHierarchyCopy);
  c.model = with_tree(c.model, tree);
  c.model.check();
  Model<float> model(c.model, c.schedule.seed);
  load_checkpoint(checkpoint, model, tree);
  Dataset data = resolve_dataset(o, c, std::move(tree));
  return {std::move(c), std::move(data), std::move(model)};
}

int cmd_eval(const Common& o, const std::string& checkpoint) {
  auto run = load_run(o, checkpoint);
  const auto& s = run.config.schedule;
  const auto m = evaluate(run.model, run.data.test, run.data.tree, run.data.stats,
                          lambdas_at(s.epochs ? s.epochs - 1 : 0, s), s.batch_size);
  const std::string table = accuracy_table(run.data.tree, m);
  std::cout << table;
  const std::string out_dir = o.out_dir.empty() ? fs::path(checkpoint).parent_path().string() : o.out_dir;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  std::ofstream(out_path(out_dir, "eval.txt")) << table;
  return 0;
}

int cmd_reconstruct(const Common& o, const std::string& checkpoint, std::size_t n, std::string out) {
  auto run = load_run(o, checkpoint);
  const ImageSet& test = run.data.test;
  if (n == 0 || n > test.count())
    throw config_error("--n must be between 1 and the test-set size (" + std::to_string(test.count()) + ")");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto batch = make_batch<float>(test, idx, run.data.tree, run.data.stats);
  NoGradGuard no_grad;
  auto fwd = run.model.forward(batch.images);
  if (out.empty()) out = test.channels == 1 ? "reconstruction.pgm" : "reconstruction.ppm";
  if (!o.out_dir.empty()) fs::create_directories(o.out_dir);
  const fs::path path = out_path(o.out_dir, out);
  write_image_grid(path, batch.raw.data(), fwd.reconstruction.data(), n, test.channels, test.height, test.width);
  std::cout << "wrote " << path.string() << "  (reconstruction loss "
            << format_number(reconstruction_loss(batch.raw, fwd.reconstruction).item(), "%.4f") << " per image)\n";
  return 0;
}

int cmd_plot(const std::string& csv, const std::string& out_dir, std::string out, const std::string& title) {
  if (csv.empty()) throw config_error("--metrics-csv is required");
  const auto curves = accuracy_curves(load_metrics_csv(csv));
  if (out.empty()) out = "accuracy.svg";
  if (!out_dir.empty()) fs::create_directories(out_dir);
  const fs::path path = out_path(out_dir, out);
  std::ofstream f(path);
  if (!f) throw format_error("plot: cannot write " + path.string());
  write_accuracy_svg(f, curves, title.empty() ? "Test accuracy per level" : title);
  std::cout << "wrote " << path.string() << " (" << curves.size() << " curves, " << curves.front().values.size()
            << " epochs)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-label capsule networks"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, recon_opts;
  bool print_config = false;
  auto* train = app.add_subcommand("train", "train a model and write checkpoints and metrics");
  add_common(train, train_opts);
  train->add_option("--out-dir", train_opts.out_dir, "output directory (default runs/<dataset>)");
  train->add_flag("--print-config", print_config, "print the resolved configuration and exit");

  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "per-level test accuracy and consistency of a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--out-dir", eval_opts.out_dir, "where eval.txt goes (default: the checkpoint's directory)");

  std::string recon_ckpt, recon_out;
  std::size_t recon_n = 10;
  auto* recon = app.add_subcommand("reconstruct", "write test inputs above their reconstructions");
  add_common(recon, recon_opts);
  recon->add_option("--checkpoint", recon_ckpt, "checkpoint file")->required();
  recon->add_option("--n", recon_n, "number of test images")->capture_default_str();
  recon->add_option("--out", recon_out, "PGM/PPM file name (under --out-dir when relative)");
  recon->add_option("--out-dir", recon_opts.out_dir, "output directory");

  std::string plot_csv, plot_out, plot_dir, plot_title;
  auto* plot = app.add_subcommand("plot", "SVG of test accuracy per level against epoch");
  plot->add_option("--metrics-csv", plot_csv, "metrics CSV written by train")->required();
  plot->add_option("--out", plot_out, "SVG file name (under --out-dir when relative)");
  plot->add_option("--out-dir", plot_dir, "output directory");
  plot->add_option("--title", plot_title, "plot title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_opts, print_config);
    if (*eval) return cmd_eval(eval_opts, eval_ckpt);
    if (*recon) return cmd_reconstruct(recon_opts, recon_ckpt, recon_n, recon_out);
    if (*plot) return cmd_plot(plot_csv, plot_dir, plot_out, plot_title);
  } catch (const std::invalid_argument& e) {  // config_error, dimension_error
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const missing_data_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const format_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
