#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "atd/common.hpp"

namespace atd::nn {

struct Param {
    Mat value;
    Mat grad;
    Mat adam_m;
    Mat adam_v;
    bool trainable = true;
};

enum class Init { zeros, ones, xavier, gaussian_scaled };

/// Named parameter tensors with deterministic (name-sorted) iteration order.
/// Initialisation is derived from (seed, name) so it does not depend on the
/// order in which modules register their parameters.
class ParamStore {
  public:
    explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

    Param& create(const std::string& name, Eigen::Index r, Eigen::Index c,
                  Init init = Init::xavier, double gain = 1.0) {
        require(params_.find(name) == params_.end(), "duplicate parameter: ", name);
        Param p;
        p.value = Mat::Zero(r, c);
        switch (init) {
            case Init::zeros:
                break;
            case Init::ones:
                p.value.setOnes();
                break;
            case Init::xavier: {
                Rng rng(derive_seed(init_seed_, "param:" + name));
                const double lim = gain * std::sqrt(6.0 / static_cast<double>(r + c));
                for (Eigen::Index i = 0; i < r; ++i)
                    for (Eigen::Index j = 0; j < c; ++j) p.value(i, j) = rng.uniform(-lim, lim);
                break;
            }
            case Init::gaussian_scaled: {
                Rng rng(derive_seed(init_seed_, "param:" + name));
                const double s = gain / std::sqrt(static_cast<double>(c));
                for (Eigen::Index i = 0; i < r; ++i)
                    for (Eigen::Index j = 0; j < c; ++j) p.value(i, j) = s * rng.gaussian();
                break;
            }
        }
        p.grad = Mat::Zero(r, c);
        p.adam_m = Mat::Zero(r, c);
        p.adam_v = Mat::Zero(r, c);
        auto [it, ok] = params_.emplace(name, std::move(p));
        (void)ok;
        return it->second;
    }

    Param& get(const std::string& name) {
        auto it = params_.find(name);
        require(it != params_.end(), "unknown parameter: ", name);
        return it->second;
    }
    const Param& get(const std::string& name) const {
        auto it = params_.find(name);
        require(it != params_.end(), "unknown parameter: ", name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    template <class F>
    void for_each(F&& f) {
        for (auto& [name, p] : params_) f(name, p);
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto& [name, p] : params_) f(name, p);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [n, p] : params_) out.push_back(n);
        return out;
    }

    void zero_grads() {
        for (auto& [n, p] : params_) p.grad.setZero();
    }

    /// Prefix-based freezing, e.g. freeze("left.") after warm-up.
    void set_trainable(const std::string& prefix, bool trainable) {
        for (auto& [n, p] : params_)
            if (n.rfind(prefix, 0) == 0) p.trainable = trainable;
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& [n, p] : params_)
            if (p.trainable) s += p.grad.squaredNorm();
        return std::sqrt(s);
    }

    /// Decoupled-weight-decay adaptive step (AdamW).
    void adamw_step(double lr, double beta1, double beta2, double eps, double weight_decay) {
        ++adam_t_;
        const double bc1 = 1.0 - std::pow(beta1, adam_t_);
        const double bc2 = 1.0 - std::pow(beta2, adam_t_);
        for (auto& [n, p] : params_) {
            if (!p.trainable) continue;
            p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad;
            p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * p.grad.cwiseProduct(p.grad);
            Mat mh = p.adam_m / bc1;
            Mat vh = p.adam_v / bc2;
            p.value -= lr * (mh.array() / (vh.array().sqrt() + eps)).matrix();
            p.value -= lr * weight_decay * p.value;
        }
    }

    std::int64_t adam_step_count() const { return adam_t_; }
    void set_adam_step_count(std::int64_t t) { adam_t_ = t; }

    /// Rounds every value through float32, matching what a checkpoint
    /// save/load cycle produces. Evaluation always runs on rounded values so
    /// in-training metrics equal metrics recomputed from the saved file.
    void round_to_f32() {
        for (auto& [n, p] : params_) {
            for (Eigen::Index i = 0; i < p.value.rows(); ++i)
                for (Eigen::Index j = 0; j < p.value.cols(); ++j)
                    p.value(i, j) = static_cast<double>(static_cast<float>(p.value(i, j)));
        }
    }

    std::uint64_t init_seed() const { return init_seed_; }

  private:
    std::map<std::string, Param> params_;
    std::uint64_t init_seed_ = 0;
    std::int64_t adam_t_ = 0;
};

}  // namespace atd::nn
