#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlcaps/checkpoint.hpp"
#include "mlcaps/data.hpp"
#include "mlcaps/hierarchy.hpp"
#include "mlcaps/model.hpp"

namespace mlcaps {

// Loss weights in force from `start_epoch` (0-indexed) until the next stage.
struct LambdaStage {
  std::size_t start_epoch = 0;
  std::vector<double> weights;
};

struct TrainSchedule {
  double initial_lr = 0.001;
  double lr_decay = 0.995;
  std::vector<LambdaStage> lambda_schedule;
  std::size_t epochs = 15;
  std::size_t batch_size = 128;
  bool mixup = false;
  double mixup_alpha = 0.2;
  std::uint64_t seed = 0;
  bool evaluate_train = false;  // eval-mode pass over the train split every epoch

  void check(std::size_t levels) const {
    if (lambda_schedule.empty() || lambda_schedule.front().start_epoch != 0)
      throw config_error("schedule: lambda schedule must start at epoch 0");
    for (std::size_t i = 0; i < lambda_schedule.size(); ++i) {
      const auto& st = lambda_schedule[i];
      if (i > 0 && st.start_epoch <= lambda_schedule[i - 1].start_epoch)
        throw config_error("schedule: lambda stage epochs must strictly increase");
      if (st.weights.size() != levels)
        throw config_error("schedule: lambda stage at epoch " + std::to_string(st.start_epoch) + " has " +
                           std::to_string(st.weights.size()) + " weights for " + std::to_string(levels) +
                           " levels");
      for (double w : st.weights)
        if (!(w >= 0.0)) throw config_error("schedule: lambda weights must be >= 0");
    }
    if (batch_size == 0) throw config_error("schedule: batch_size must be positive");
    if (!(initial_lr > 0.0) || !(lr_decay > 0.0)) throw config_error("schedule: learning rate must be positive");
    if (mixup && !(mixup_alpha > 0.0)) throw config_error("schedule: mixup alpha must be positive");
  }
};

inline double lr_at(std::size_t epoch, const TrainSchedule& s) {
  return s.initial_lr * std::pow(s.lr_decay, static_cast<double>(epoch));
}

inline const std::vector<double>& lambdas_at(std::size_t epoch, const TrainSchedule& s) {
  if (s.lambda_schedule.empty()) throw config_error("schedule: empty lambda schedule");
  const LambdaStage* current = &s.lambda_schedule.front();
  for (const auto& st : s.lambda_schedule)
    if (st.start_epoch <= epoch) current = &st;
  return current->weights;
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;
};

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t step, double lr, const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw dimension_error("adam: parameter/gradient/moment sizes differ");
  const T b1 = T(h.beta1), b2 = T(h.beta2), eps = T(h.epsilon);
  const T c1 = T(1.0 - std::pow(h.beta1, double(step)));
  const T c2 = T(1.0 - std::pow(h.beta2, double(step)));
  const T rate = T(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    param[i] -= rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

// One bias-corrected Adam step over every parameter, reading accumulated grads.
template <typename T>
void adam_step(std::vector<NamedParameter<T>>& params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T(0));
      state.v.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw dimension_error("adam: state does not match parameters");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (state.m[i].size() != t.size()) throw dimension_error("adam: moment shape mismatch for " + params[i].name);
    auto grad = t.mutable_grad();
    adam_update<T>(t.mutable_data(), grad, state.m[i], state.v[i], state.step, lr, state.hyper);
  }
}

struct SplitMetrics {
  std::vector<double> accuracy;     // per level, in [0,1]
  std::vector<double> margin_loss;  // per level
  double recon_loss = 0.0;
  double total_loss = 0.0;
  double consistency = 0.0;
};

template <typename T>
struct StepLosses {
  std::vector<Tensor<T>> levels;
  Tensor<T> recon, total;
};

template <typename T>
StepLosses<T> compute_losses(const ForwardOutput<T>& out, const Batch<T>& batch, const std::vector<double>& lambdas,
                             const LossConstants& constants) {
  StepLosses<T> l;
  for (std::size_t n = 0; n < out.scores.size(); ++n)
    l.levels.push_back(margin_loss(out.scores[n], batch.targets[n], constants));
  l.recon = reconstruction_loss(batch.raw, out.reconstruction);
  l.total = total_loss(l.levels, l.recon, lambdas, constants.tau);
  return l;
}

// Eval-mode pass: decoder masks from argmax, no graph recorded.
template <typename T>
SplitMetrics evaluate(const Model<T>& model, const ImageSet& set, const LabelTree& tree, const ChannelStats& stats,
                      const std::vector<double>& lambdas, std::size_t batch_size,
                      std::vector<MultiLabel>* predictions = nullptr) {
  NoGradGuard no_grad;
  const std::size_t levels = tree.depth(), n = set.count();
  SplitMetrics m;
  m.accuracy.assign(levels, 0.0);
  m.margin_loss.assign(levels, 0.0);
  std::vector<MultiLabel> preds;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    auto batch = make_batch<T>(set, std::span<const std::size_t>(idx).subspan(start, count), tree, stats);
    auto out = model.forward(batch.images);
    auto losses = compute_losses(out, batch, lambdas, model.config().loss);
    auto p = predict_labels(out.scores);
    for (std::size_t j = 0; j < count; ++j)
      for (std::size_t l = 0; l < levels; ++l) m.accuracy[l] += p[j].ids[l] == batch.labels[j].ids[l] ? 1.0 : 0.0;
    for (std::size_t l = 0; l < levels; ++l) m.margin_loss[l] += double(losses.levels[l].item()) * double(count);
    m.recon_loss += double(losses.recon.item()) * double(count);
    m.total_loss += double(losses.total.item()) * double(count);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  for (std::size_t l = 0; l < levels; ++l) {
    m.accuracy[l] /= double(n);
    m.margin_loss[l] /= double(n);
  }
  m.recon_loss /= double(n);
  m.total_loss /= double(n);
  m.consistency = consistency_rate(tree, preds);
  if (predictions) *predictions = std::move(preds);
  return m;
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based count of completed epochs
  double lr = 0.0;
  std::vector<double> lambdas;
  SplitMetrics train, test;
  double seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_fine_accuracy = -1.0;
};

inline std::string format_number(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "epoch,level,split,accuracy,loss_margin,loss_recon,loss_total,lr,lambda";

// One row per (epoch, level, split).
inline void write_metrics_csv(std::ostream& out, const LabelTree& tree, const RunMetrics& run) {
  out << kMetricsHeader << '\n';
  for (const auto& e : run.epochs)
    for (const auto* split : {"train", "test"}) {
      const SplitMetrics& s = std::string(split) == "train" ? e.train : e.test;
      for (std::size_t l = 0; l < tree.depth(); ++l)
        out << e.epoch << ',' << tree.levels[l].name << ',' << split << ',' << format_number(s.accuracy[l]) << ','
            << format_number(s.margin_loss[l]) << ',' << format_number(s.recon_loss) << ','
            << format_number(s.total_loss) << ',' << format_number(e.lr, "%.9g") << ','
            << format_number(e.lambdas[l], "%.4f") << '\n';
    }
}

struct TrainOutputs {
  std::filesystem::path out_dir;  // empty: nothing written
  std::ostream* log = nullptr;
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kFinalCheckpoint = "checkpoint_final.mlcp";
inline constexpr const char* kBestCheckpoint = "checkpoint_best.mlcp";
inline constexpr const char* kRunMetadata = "run.json";

template <typename T>
RunMetrics train_run(Model<T>& model, const TrainSchedule& schedule, const Dataset& data,
                     const TrainOutputs& outputs = {}) {
  const LabelTree& tree = data.tree;
  if (model.config().level_classes != tree.class_counts())
    throw config_error("train: model levels do not match the label tree");
  if (auto issues = validate(tree); !issues.empty()) throw config_error("train: invalid label tree: " + issues[0]);
  schedule.check(tree.depth());
  if (data.train.count() == 0 || data.test.count() == 0) throw config_error("train: empty dataset split");
  const bool write = !outputs.out_dir.empty();
  if (write) std::filesystem::create_directories(outputs.out_dir);

  std::mt19937_64 rng(schedule.seed ^ 0x9e3779b97f4a7c15ULL);  // decorrelated from model init
  AdamState<T> adam;
  RunMetrics run;
  const std::size_t n = data.train.count(), levels = tree.depth();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  nlohmann::json epochs_json = nlohmann::json::array();

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, schedule);
    const std::vector<double> lambdas = lambdas_at(epoch, schedule);
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr;
    em.lambdas = lambdas;
    SplitMetrics& tr = em.train;
    tr.accuracy.assign(levels, 0.0);
    tr.margin_loss.assign(levels, 0.0);
    std::vector<MultiLabel> train_preds;
    for (std::size_t start = 0; start < n; start += schedule.batch_size) {
      const std::size_t count = std::min(schedule.batch_size, n - start);
      auto batch = make_batch<T>(data.train, std::span<const std::size_t>(order).subspan(start, count), tree,
                                 data.stats);
      if (schedule.mixup && count >= 2) batch = mixup(batch, schedule.mixup_alpha, rng);
      auto out = model.forward(batch.images, &batch.targets);
      auto losses = compute_losses(out, batch, lambdas, model.config().loss);
      if (!std::isfinite(double(losses.total.item())))
        throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch starting at " +
                            std::to_string(start) + "; first non-finite tensor: " + first_nonfinite(losses.total));
      model.zero_grad();
      backward(losses.total);
      adam_step(model.parameters(), adam, lr);

      auto p = predict_labels(out.scores);
      for (std::size_t j = 0; j < count; ++j)
        for (std::size_t l = 0; l < levels; ++l) tr.accuracy[l] += p[j].ids[l] == batch.labels[j].ids[l] ? 1.0 : 0.0;
      for (std::size_t l = 0; l < levels; ++l) tr.margin_loss[l] += double(losses.levels[l].item()) * double(count);
      tr.recon_loss += double(losses.recon.item()) * double(count);
      tr.total_loss += double(losses.total.item()) * double(count);
      train_preds.insert(train_preds.end(), p.begin(), p.end());
    }
    for (std::size_t l = 0; l < levels; ++l) {
      tr.accuracy[l] /= double(n);
      tr.margin_loss[l] /= double(n);
    }
    tr.recon_loss /= double(n);
    tr.total_loss /= double(n);
    tr.consistency = consistency_rate(tree, train_preds);
    if (schedule.evaluate_train)
      em.train = evaluate(model, data.train, tree, data.stats, lambdas, schedule.batch_size);
    em.test = evaluate(model, data.test, tree, data.stats, lambdas, schedule.batch_size);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.epochs.push_back(em);

    const double fine_acc = em.test.accuracy.back();
    const bool best = fine_acc > run.best_fine_accuracy;
    if (best) {
      run.best_fine_accuracy = fine_acc;
      run.best_epoch = em.epoch;
    }
    if (outputs.log) {
      *outputs.log << "epoch " << em.epoch << "/" << schedule.epochs << "  lr " << format_number(lr, "%.3g")
                   << "  loss " << format_number(em.train.total_loss, "%.4f") << "  test acc";
      for (std::size_t l = 0; l < levels; ++l)
        *outputs.log << ' ' << tree.levels[l].name << '=' << format_number(100.0 * em.test.accuracy[l], "%.2f") << '%';
      *outputs.log << "  consistency " << format_number(em.test.consistency, "%.4f") << "  ("
                   << format_number(em.seconds, "%.1f") << " s)\n";
      outputs.log->flush();
    }
    if (write) {
      if (best) save_checkpoint(outputs.out_dir / kBestCheckpoint, model, tree);
      std::ofstream csv(outputs.out_dir / kMetricsFile);
      write_metrics_csv(csv, tree, run);
      epochs_json.push_back({{"epoch", em.epoch},
                             {"train_consistency", em.train.consistency},
                             {"test_consistency", em.test.consistency},
                             {"seconds", em.seconds}});
    }
    if (outputs.on_epoch) outputs.on_epoch(em);
  }

  if (write) {
    save_checkpoint(outputs.out_dir / kFinalCheckpoint, model, tree);
    nlohmann::json meta;
    meta["seed"] = schedule.seed;
    char fp[32];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(config_fingerprint(model.config(), tree)));
    meta["fingerprint"] = fp;
    meta["model"] = canonical_string(model.config());
    meta["schedule"] = {{"initial_lr", schedule.initial_lr},
                        {"lr_decay", schedule.lr_decay},
                        {"epochs", schedule.epochs},
                        {"batch_size", schedule.batch_size},
                        {"mixup", schedule.mixup},
                        {"mixup_alpha", schedule.mixup_alpha}};
    for (const auto& st : schedule.lambda_schedule)
      meta["schedule"]["lambda"].push_back({{"start_epoch", st.start_epoch}, {"weights", st.weights}});
    meta["train_images"] = data.train.count();
    meta["test_images"] = data.test.count();
    meta["best_epoch"] = run.best_epoch;
    meta["best_fine_accuracy"] = run.best_fine_accuracy;
    meta["epochs"] = epochs_json;
    std::ofstream(outputs.out_dir / kRunMetadata) << meta.dump(2) << '\n';
  }
  return run;
}

}  // namespace mlcaps
