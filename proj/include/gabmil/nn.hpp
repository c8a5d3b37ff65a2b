#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gabmil/autodiff.hpp"
#include "gabmil/rng.hpp"

namespace gabmil {

enum class Activation { None, Relu, Tanh, Sigmoid };

enum class InitScheme { UniformFanIn, Zero };

/// y = x * W + b, optionally followed by an activation.
/// Weights init to uniform(-sqrt(1/in), +sqrt(1/in)), bias to zero.
template <typename T>
struct LinearLayer {
  Parameter<T> weight;  // [in, out]
  Parameter<T> bias;    // [out]
  Activation act = Activation::None;

  LinearLayer() = default;

  LinearLayer(std::size_t in, std::size_t out, std::uint64_t seed,
              Activation act_ = Activation::None, InitScheme scheme = InitScheme::UniformFanIn)
      : act(act_) {
    if (in == 0 || out == 0) {
      throw std::invalid_argument("linear: dims must be >= 1, got " + std::to_string(in) + "x" +
                                  std::to_string(out));
    }
    Tensor<T> w({in, out});
    if (scheme == InitScheme::UniformFanIn) {
      Rng rng(seed);
      double bound = std::sqrt(1.0 / static_cast<double>(in));
      for (std::size_t i = 0; i < w.numel(); ++i) {
        w[i] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
    weight = Parameter<T>(std::move(w));
    bias = Parameter<T>(Tensor<T>::zeros({out}));
  }

  std::size_t in_dim() const { return weight.value.dim(0); }
  std::size_t out_dim() const { return weight.value.dim(1); }

  Value<T> forward(Tape<T>& tape, Value<T> x) {
    Value<T> y = ops::add(ops::matmul(x, tape.leaf(weight)), tape.leaf(bias));
    switch (act) {
      case Activation::None: return y;
      case Activation::Relu: return ops::relu(y);
      case Activation::Tanh: return ops::tanh(y);
      case Activation::Sigmoid: return ops::sigmoid(y);
    }
    return y;
  }
};

template <typename T>
struct AdamConfig {
  T lr = static_cast<T>(1e-4);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  T weight_decay = T(0);
};

/// Classic Adam with bias correction. Weight decay is coupled L2: it is added
/// to the gradient before the moment updates.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamConfig<T> cfg)
      : cfg_(cfg), params_(std::move(params)) {
    for (Parameter<T>* p : params_) {
      m_.push_back(Tensor<T>::zeros(p->value.shape()));
      v_.push_back(Tensor<T>::zeros(p->value.shape()));
    }
  }

  void zero_grad() {
    for (Parameter<T>* p : params_) p->zero_grad();
  }

  void step() {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      if (!params_[pi]->grad.all_finite()) {
        throw std::runtime_error("adam: non-finite gradient in parameter " + std::to_string(pi) +
                                 " at step " + std::to_string(t_ + 1));
      }
    }
    ++t_;
    T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
    T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Parameter<T>& p = *params_[pi];
      Tensor<T>& m = m_[pi];
      Tensor<T>& v = v_[pi];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        T g = p.grad[i] + cfg_.weight_decay * p.value[i];
        m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (T(1) - cfg_.beta2) * g * g;
        T mhat = m[i] / bc1;
        T vhat = v[i] / bc2;
        p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  long step_count() const { return t_; }

 private:
  AdamConfig<T> cfg_;
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Parameter<T>*>>;

}  // namespace gabmil
