#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "calign/autograd.hpp"
#include "calign/error.hpp"

namespace calign {

/// Named trainable tensors owned by a model component.
/// Copies are deep: the copy owns fresh variables holding equal values.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other) { *this = other; }
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(const ParameterSet& other) {
    if (this == &other) return *this;
    entries_.clear();
    for (const auto& e : other.entries_) add(e.name, e.var.value(), e.var.requires_grad());
    return *this;
  }

  ad::Var add(std::string name, Mat init, bool trainable = true) {
    entries_.push_back({std::move(name), ad::Var(std::move(init), trainable)});
    return entries_.back().var;
  }

  struct Entry {
    std::string name;
    ad::Var var;
  };

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  ad::Var& at(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e.var;
    throw ConfigError("unknown parameter: " + name);
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  /// Order-sensitive FNV-1a hash over names and raw value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
    };
    for (const auto& e : entries_) {
      mix(e.name.data(), e.name.size());
      mix(e.var.value().data(), sizeof(double) * static_cast<std::size_t>(e.var.value().size()));
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a fixed list of trainable variables.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Var> params, AdamConfig config)
      : config_(config), params_(std::move(params)) {
    if (!(config_.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    for (const auto& p : params_) {
      m_.push_back(Mat::Zero(p.rows(), p.cols()));
      v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
  }

  /// Applies one update from the gradients currently held by the params.
  /// Params without an accumulated gradient are left untouched.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const Mat& g = p.grad();
      if (g.size() == 0) continue;
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
      p.mutable_value().array() -= config_.learning_rate * (m_[i].array() / c1) /
                                   ((v_[i].array() / c2).sqrt() + config_.epsilon);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamConfig& config() const { return config_; }
  long steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<ad::Var> params_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  long t_ = 0;
};

}  // namespace calign
