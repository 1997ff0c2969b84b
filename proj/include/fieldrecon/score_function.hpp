#pragma once

#include <memory>
#include <span>
#include <vector>

#include "fieldrecon/diffusion.hpp"
#include "fieldrecon/tensor.hpp"

namespace fieldrecon {

/// Opaque record of a forward evaluation, consumed by the matching backward.
class ScoreTape {
 public:
  virtual ~ScoreTape() = default;
};

template <typename T>
struct ScoreEvaluation {
  Tensor<T> score;
  std::unique_ptr<ScoreTape> tape;  // null unless recording was requested
};

/// Estimator of grad_x log p_t(x) evaluated on a batch, one step index per item.
///
/// Implementations are immutable after construction; evaluate() and
/// input_vjp() are safe to call concurrently.
template <typename T>
class ScoreFunction {
 public:
  virtual ~ScoreFunction() = default;

  /// Channel count the function accepts (0 = any).
  virtual int channels() const = 0;

  virtual ScoreEvaluation<T> evaluate(const Tensor<T>& x, std::span<const int> steps,
                                      const NoiseSchedule& sched, bool record) const = 0;

  /// Vector-Jacobian product: returns J^T g with J = d score / d x at the taped point.
  virtual Tensor<T> input_vjp(const ScoreTape& tape, const Tensor<T>& grad_score) const = 0;

  /// Convenience for the common "every item at step t" case.
  ScoreEvaluation<T> evaluate_at(const Tensor<T>& x, int t, const NoiseSchedule& sched,
                                 bool record) const {
    const std::vector<int> steps(static_cast<std::size_t>(x.batch), t);
    return evaluate(x, steps, sched, record);
  }
};

/// Score function with trainable parameters stored as one flat vector.
template <typename T>
class TrainableScore : public ScoreFunction<T> {
 public:
  virtual std::span<const T> parameters() const = 0;
  virtual std::span<T> mutable_parameters() = 0;

  /// Accumulates d<grad_score, score>/d theta into `grad_params`; if `grad_input`
  /// is non-null it is assigned the input gradient as well.
  virtual void backward(const ScoreTape& tape, const Tensor<T>& grad_score, std::span<T> grad_params,
                        Tensor<T>* grad_input) const = 0;
};

}  // namespace fieldrecon
