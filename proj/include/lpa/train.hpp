#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lpa/checkpoint.hpp"
#include "lpa/data.hpp"
#include "lpa/model.hpp"

namespace lpa {

/// Step-decay SGD schedule. Defaults: halve every 25 epochs over 300 epochs,
/// batch 128, momentum 0.9, weight decay 5e-4.
struct TrainSchedule {
  double initial_lr = 0.01;
  double decay_factor = 0.5;
  int decay_period = 25;
  int epochs = 300;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  /// Initial rate 0.01 for the CIFAR datasets, 0.0025 for SVHN.
  static TrainSchedule for_dataset(DatasetName name) {
    TrainSchedule s;
    s.initial_lr = name == DatasetName::svhn ? 0.0025 : 0.01;
    return s;
  }

  void validate() const {
    if (!(initial_lr > 0)) throw UsageError("initial learning rate must be positive");
    if (!(decay_factor > 0 && decay_factor <= 1)) throw UsageError("decay factor must lie in (0, 1]");
    if (decay_period < 1) throw UsageError("decay period must be at least 1 epoch");
    if (epochs < 1) throw UsageError("epochs must be at least 1");
    if (batch_size < 1) throw UsageError("batch size must be at least 1");
    if (!(momentum >= 0 && momentum < 1)) throw UsageError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw UsageError("weight decay must be nonnegative");
  }
};

/// initial_lr * decay_factor ^ floor(e / decay_period)
inline double lr_at_epoch(const TrainSchedule& s, int epoch) {
  s.validate();
  if (epoch < 0 || epoch >= s.epochs)
    throw UsageError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.epochs) + ")");
  return s.initial_lr * std::pow(s.decay_factor, epoch / s.decay_period);
}

/// v <- momentum*v + grad + weight_decay*p ; p <- p - lr*v
template <typename T>
void sgd_step(std::span<Parameter<T>> params, std::span<Tensor<T>> velocity, double lr, double momentum,
              double weight_decay) {
  if (params.size() != velocity.size()) throw ConfigError("sgd_step: one velocity buffer per parameter required");
  for (const Parameter<T>& p : params)
    if (!p.grad.all_finite()) throw NumericError("sgd_step: non-finite gradient in parameter '" + p.name + "'");
  const T lr_t = static_cast<T>(lr), mom = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params[i];
    Tensor<T>& v = velocity[i];
    if (v.shape() != p.value.shape())
      throw ConfigError("sgd_step: velocity for '" + p.name + "' has shape " + shape_string(v.shape()));
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = mom * v[j] + p.grad[j] + wd * p.value[j];
      p.value[j] -= lr_t * v[j];
    }
  }
}

/// Index of the largest entry; ties go to the lowest index.
template <typename T>
std::size_t argmax_row(const T* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

namespace detail {

template <typename T>
Tensor<T> gather_images(const Tensor<float>& images, std::span<const std::size_t> indices) {
  Tensor<T> batch({indices.size(), images.dim(1), images.dim(2), images.dim(3)});
  const std::size_t stride = images.size() / images.dim(0);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(images.data() + indices[i] * stride, stride, batch.data() + i * stride);
  return batch;
}

}  // namespace detail

/// Top-1 error: fraction of samples whose argmax probability differs from the label.
template <typename T>
double evaluate(Network<T>& net, const Tensor<float>& images, std::span<const int> labels,
                std::size_t batch_size = 256) {
  if (labels.empty()) throw UsageError("evaluate: empty evaluation set");
  if (images.dim(0) != labels.size())
    throw ConfigError("evaluate: " + std::to_string(images.dim(0)) + " images but " + std::to_string(labels.size()) +
                      " labels");
  std::size_t wrong = 0;
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < labels.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, labels.size() - start);
    const auto probs = net.predict(detail::gather_images<T>(images, std::span(idx).subspan(start, count))).probs;
    const std::size_t k = probs.dim(1);
    for (std::size_t i = 0; i < count; ++i)
      if (static_cast<int>(argmax_row(probs.data() + i * k, k)) != labels[start + i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

/// Per-epoch full permutation drawn from a stream keyed on (seed, epoch), so
/// any epoch's batch order can be regenerated without replaying earlier ones.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5348u};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_err = 0;
  double test_err = 0;
  double seconds = 0;
};

using MetricsLog = std::vector<EpochRecord>;

/// Equality on everything except wall-clock time.
inline bool same_metrics(const MetricsLog& a, const MetricsLog& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].epoch != b[i].epoch || a[i].lr != b[i].lr || a[i].train_loss != b[i].train_loss ||
        a[i].train_err != b[i].train_err || a[i].test_err != b[i].test_err)
      return false;
  return true;
}

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_err,test_err,seconds";

inline std::string metrics_csv_line(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f", r.epoch, r.lr, r.train_loss, r.train_err,
                r.test_err, r.seconds);
  return buf;
}

struct TrainOptions {
  /// Called every decay_period epochs and after the final epoch.
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Continue from this state instead of starting at epoch 0.
  const Checkpoint* resume = nullptr;
  /// When false the seconds column is written as 0 so logs compare bytewise.
  bool record_time = true;
  std::size_t eval_batch = 256;
};

struct TrainResult {
  MetricsLog log;
  Checkpoint final_checkpoint;
};

/// Raised when the loss or a gradient stops being finite. Carries the last
/// checkpoint handed to on_checkpoint, if any.
struct DivergenceError : NumericError {
  DivergenceError(const std::string& what, std::shared_ptr<const Checkpoint> last)
      : NumericError(what), last_good(std::move(last)) {}
  std::shared_ptr<const Checkpoint> last_good;
};

template <typename T>
std::vector<Tensor<float>> momentum_snapshot(const std::vector<Tensor<T>>& velocity) {
  std::vector<Tensor<float>> out;
  for (const Tensor<T>& v : velocity) out.push_back(v.template cast<float>());
  return out;
}

/// Shuffled mini-batch momentum SGD on the cross-entropy of the network's probabilities.
template <typename T>
TrainResult train(Network<T>& net, const DatasetBundle& data, const TrainSchedule& schedule, std::uint64_t seed,
                  const TrainOptions& options = {}) {
  schedule.validate();
  const std::size_t n = data.train_labels.size();
  if (n == 0 || data.train_images.dim(0) != n) throw ConfigError("train: training images and labels disagree");
  if (net.config().num_classes != data.num_classes())
    throw ConfigError("train: network has " + std::to_string(net.config().num_classes) + " classes, dataset " +
                      std::to_string(data.num_classes()));

  std::vector<Parameter<T>>& params = net.parameters();
  std::vector<Tensor<T>> velocity;
  for (const Parameter<T>& p : params) velocity.emplace_back(p.value.shape());

  int start_epoch = 0;
  if (options.resume) {
    const Checkpoint& ck = *options.resume;
    if (ck.seed != seed) throw ConfigError("train: resume seed " + std::to_string(ck.seed) + " differs from " +
                                           std::to_string(seed));
    if (static_cast<int>(ck.epoch) >= schedule.epochs)
      throw UsageError("train: checkpoint already at epoch " + std::to_string(ck.epoch));
    restore_parameters(net, ck);
    if (!ck.momentum.empty())
      for (std::size_t i = 0; i < velocity.size(); ++i) velocity[i] = ck.momentum[i].template cast<T>();
    start_epoch = static_cast<int>(ck.epoch);
  }

  TrainResult result;
  std::shared_ptr<const Checkpoint> last_good;
  const std::size_t k = data.num_classes();
  for (int epoch = start_epoch; epoch < schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(schedule, epoch);
    const std::vector<std::size_t> perm = epoch_permutation(n, seed, epoch);
    double loss_sum = 0;
    std::size_t wrong = 0;
    try {
      for (std::size_t start = 0; start < n; start += schedule.batch_size) {
        const std::size_t count = std::min(schedule.batch_size, n - start);
        const std::span<const std::size_t> idx(perm.data() + start, count);
        std::vector<int> labels(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = data.train_labels[idx[i]];

        Tape<T> tape;
        net.zero_grad();
        ForwardPass<T> pass = net.forward(tape, detail::gather_images<T>(data.train_images, idx));
        Var<T> loss = cross_entropy(pass.probs, std::span<const int>(labels));
        tape.backward(loss);
        sgd_step(std::span(params), std::span(velocity), lr, schedule.momentum, schedule.weight_decay);

        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(count);
        const Tensor<T>& probs = pass.probs.value();
        for (std::size_t i = 0; i < count; ++i)
          if (static_cast<int>(argmax_row(probs.data() + i * k, k)) != labels[i]) ++wrong;
      }
    } catch (const NumericError& e) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what() +
                                (last_good ? "; last good checkpoint is epoch " + std::to_string(last_good->epoch)
                                           : "; no checkpoint written yet"),
                            last_good);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_err = static_cast<double>(wrong) / static_cast<double>(n);
    rec.test_err = data.test_labels.empty()
                       ? 0.0
                       : evaluate(net, data.test_images, std::span<const int>(data.test_labels), options.eval_batch);
    if (options.record_time)
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    const bool last = epoch + 1 == schedule.epochs;
    if ((epoch + 1) % schedule.decay_period == 0 || last) {
      auto ck = std::make_shared<const Checkpoint>(
          make_checkpoint(net, static_cast<std::uint32_t>(epoch + 1), seed, momentum_snapshot(velocity)));
      if (options.on_checkpoint) options.on_checkpoint(*ck);
      last_good = ck;
    }
  }
  result.final_checkpoint = *last_good;
  return result;
}

}  // namespace lpa
