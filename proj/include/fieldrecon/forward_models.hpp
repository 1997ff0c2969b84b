#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fieldrecon/field.hpp"
#include "fieldrecon/rng.hpp"

namespace fieldrecon {

struct GridPoint {
  int row = 0;
  int col = 0;
  bool operator==(const GridPoint&) const = default;
};

/// Sensor positions on an H x W grid, all reading one physical quantity.
struct SensorLayout {
  int height = 0;
  int width = 0;
  std::string quantity = kStressTag;
  std::vector<GridPoint> positions;

  int size() const { return static_cast<int>(positions.size()); }
  /// Throws LayoutError on out-of-bounds or repeated positions.
  void validate() const;
  /// FNV-1a over the grid extent, quantity and positions in order.
  std::uint64_t hash() const;
  /// Layout keeping only the sensors at `indices` (in the given order).
  SensorLayout subset(std::span<const int> indices) const;
  /// Values of channel `channel` of `field` at the sensor positions.
  std::vector<float> read(const Field& field, int channel = 0) const;
};

enum class ForwardKind { direct_selection, channel_selection, surrogate };

const char* to_string(ForwardKind kind);
/// Parses "DS", "CS" or "NN" (case-insensitive). Throws ConfigError.
ForwardKind parse_forward_kind(const std::string& name);
/// Channel count of the score prior each forward model works with.
int required_score_channels(ForwardKind kind);

/// Differentiable map A from one field sample to a reading vector.
template <typename T>
class ForwardOperator {
 public:
  virtual ~ForwardOperator() = default;

  virtual ForwardKind kind() const = 0;
  virtual Shape input_shape() const = 0;
  virtual int output_size() const = 0;

  virtual void apply(std::span<const T> x, std::span<T> y) const = 0;
  /// Adds J_A(x)^T g into `grad_x`.
  virtual void vjp_add(std::span<const T> x, std::span<const T> g, std::span<T> grad_x) const = 0;

  std::vector<T> apply(std::span<const T> x) const {
    std::vector<T> y(static_cast<std::size_t>(output_size()));
    apply(x, y);
    return y;
  }
};

/// Picks grid cells out of one channel of the field. Serves both DS (one-channel
/// field) and CS (two-channel field, selecting the measurable channel).
template <typename T>
class SelectionOperator final : public ForwardOperator<T> {
 public:
  SelectionOperator(ForwardKind kind, SensorLayout layout, Shape input, int channel);

  ForwardKind kind() const override { return kind_; }
  Shape input_shape() const override { return input_; }
  int output_size() const override { return static_cast<int>(index_.size()); }
  using ForwardOperator<T>::apply;
  void apply(std::span<const T> x, std::span<T> y) const override;
  void vjp_add(std::span<const T> x, std::span<const T> g, std::span<T> grad_x) const override;

  const SensorLayout& layout() const { return layout_; }
  int channel() const { return channel_; }

 private:
  ForwardKind kind_;
  SensorLayout layout_;
  Shape input_;
  int channel_;
  std::vector<std::size_t> index_;
};

/// Direct selection on a single-channel target field. Rejects layouts whose
/// quantity differs from `target_quantity`.
template <typename T>
std::shared_ptr<SelectionOperator<T>> make_direct_selection(const SensorLayout& layout,
                                                            const std::string& target_quantity);

/// Channel selection on a field whose channels carry `tags`; the layout quantity
/// names the channel that is read.
template <typename T>
std::shared_ptr<SelectionOperator<T>> make_channel_selection(const SensorLayout& layout,
                                                             const std::vector<std::string>& tags);

std::vector<float> ds_apply(const Field& x0_hat, const SensorLayout& layout);
std::vector<float> cs_apply(const Field& x0_hat, const SensorLayout& layout);

/// Two-layer perceptron in -> hidden -> out with ReLU after both layers.
/// Parameters are stored flat as [W1 (hidden x in), b1, W2 (out x hidden), b2].
template <typename T>
class MlpSurrogate {
 public:
  MlpSurrogate() = default;
  MlpSurrogate(int inputs, int hidden, int outputs, std::uint64_t seed);
  MlpSurrogate(int inputs, int hidden, int outputs, std::vector<T> parameters);

  int inputs() const { return inputs_; }
  int hidden() const { return hidden_; }
  int outputs() const { return outputs_; }
  std::span<const T> parameters() const { return params_; }
  std::span<T> mutable_parameters() { return params_; }

  void forward(std::span<const T> x, std::span<T> y) const;
  std::vector<T> forward(std::span<const T> x) const;
  /// Backpropagates `g` = dL/dy at input `x`. Adds dL/dtheta into `grad_params`
  /// when non-empty and dL/dx into `grad_x` when non-empty.
  void backward(std::span<const T> x, std::span<const T> g, std::span<T> grad_params,
                std::span<T> grad_x) const;

  template <typename U>
  MlpSurrogate<U> cast() const {
    return MlpSurrogate<U>(inputs_, hidden_, outputs_, std::vector<U>(params_.begin(), params_.end()));
  }

 private:
  std::size_t w1() const { return 0; }
  std::size_t b1() const { return static_cast<std::size_t>(hidden_) * inputs_; }
  std::size_t w2() const { return b1() + hidden_; }
  std::size_t b2() const { return w2() + static_cast<std::size_t>(outputs_) * hidden_; }

  int inputs_ = 0, hidden_ = 0, outputs_ = 0;
  std::vector<T> params_;
};

/// A trained surrogate together with the units it was fitted in.
///
/// Fields enter z-scored with (field_mean, field_std). Readings are divided by
/// a per-sensor scale without centring, which keeps the targets non-negative
/// and so reachable through the output ReLU.
struct SurrogateModel {
  MlpSurrogate<float> mlp;
  double field_mean = 0.0;
  double field_std = 1.0;
  std::vector<double> reading_scale;
  std::uint64_t layout_hash = 0;
  int height = 0;
  int width = 0;
};

/// NN forward model: surrogate outputs restricted to `outputs` (all if empty).
template <typename T>
class SurrogateOperator final : public ForwardOperator<T> {
 public:
  SurrogateOperator(MlpSurrogate<T> mlp, Shape input, std::vector<int> outputs = {});

  ForwardKind kind() const override { return ForwardKind::surrogate; }
  Shape input_shape() const override { return input_; }
  int output_size() const override { return static_cast<int>(outputs_.size()); }
  using ForwardOperator<T>::apply;
  void apply(std::span<const T> x, std::span<T> y) const override;
  void vjp_add(std::span<const T> x, std::span<const T> g, std::span<T> grad_x) const override;

 private:
  MlpSurrogate<T> mlp_;
  Shape input_;
  std::vector<int> outputs_;
};

template <typename T>
std::shared_ptr<SurrogateOperator<T>> make_surrogate_operator(const SurrogateModel& model,
                                                              std::vector<int> outputs = {});

std::vector<float> nn_apply(const MlpSurrogate<float>& surrogate, const Field& x0_hat);

struct SurrogateTrainOptions {
  int hidden = 100;
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  std::function<void(int, double, double)> on_epoch;  // (epoch, train loss, val loss)
};

struct SurrogateTrainResult {
  MlpSurrogate<float> mlp;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  /// ||pred - y|| / ||y|| over the validation split (training split if empty).
  double validation_relative_error = 0.0;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Fits an MLP mapping flattened single-channel fields to readings with Adam
/// on mean squared error. `groups` assigns each pair to a split unit (loading
/// history); whole groups are held out for validation. Inputs and targets are
/// used as given (already in model units).
SurrogateTrainResult train_surrogate(std::span<const Field> inputs,
                                     std::span<const std::vector<float>> readings,
                                     std::span<const int> groups,
                                     const SurrogateTrainOptions& options);

}  // namespace fieldrecon
