#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pivotgen/rng.hpp"
#include "pivotgen/tensor.hpp"

namespace pivotgen {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    double epsilon = 1e-8;
};

// Named parameters plus AdamW moments. Entries keep registration order so
// checkpoints and update sweeps are deterministic. Buffers (trainable=false)
// hold things like EMA codebook state that no gradient touches.
template <typename T>
class ParameterStoreT {
public:
    struct Entry {
        std::string name;
        TensorT<T> value;
        TensorT<T> m1, m2;
        bool trainable = true;
    };

    TensorT<T>& add(const std::string& name, std::vector<int> shape, bool trainable = true) {
        if (index_.count(name)) throw Error("parameter store: duplicate name " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back(Entry{name, TensorT<T>(shape), TensorT<T>(), TensorT<T>(), trainable});
        if (trainable) {
            entries_.back().m1 = TensorT<T>(shape);
            entries_.back().m2 = TensorT<T>(shape);
        }
        return entries_.back().value;
    }

    TensorT<T>& add_normal(const std::string& name, std::vector<int> shape, Rng& rng, double stddev = 0.02) {
        TensorT<T>& t = add(name, std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    TensorT<T>& add_ones(const std::string& name, std::vector<int> shape) {
        TensorT<T>& t = add(name, std::move(shape));
        std::fill(t.data.begin(), t.data.end(), T(1));
        return t;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("parameter store: unknown name " + name);
        return it->second;
    }

    Entry& entry(int i) { return entries_[static_cast<std::size_t>(i)]; }
    const Entry& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }
    TensorT<T>& operator[](const std::string& name) { return entries_[index_of(name)].value; }
    const TensorT<T>& operator[](const std::string& name) const { return entries_[index_of(name)].value; }

    int count() const { return static_cast<int>(entries_.size()); }
    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    void zero_grads() {
        for (auto& e : entries_) e.value.zero_grad();
    }

    // Decoupled-weight-decay Adam with bias correction. Entries whose grad was
    // never allocated this step are skipped (neither updated nor decayed).
    void adamw_step(const AdamWConfig& cfg) {
        ++step_;
        T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
        T corr1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(step_)));
        T corr2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(step_)));
        for (auto& e : entries_) {
            if (!e.trainable || e.value.grad.empty()) continue;
            T* w = e.value.data.data();
            T* g = e.value.grad.data();
            T* m1 = e.m1.data.data();
            T* m2 = e.m2.data.data();
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                m1[i] = b1 * m1[i] + (T(1) - b1) * g[i];
                m2[i] = b2 * m2[i] + (T(1) - b2) * g[i] * g[i];
                T mhat = m1[i] / corr1;
                T vhat = m2[i] / corr2;
                w[i] -= static_cast<T>(cfg.lr) * (mhat / (std::sqrt(vhat) + static_cast<T>(cfg.epsilon)) +
                                                  static_cast<T>(cfg.weight_decay) * w[i]);
            }
        }
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
    std::uint64_t step_ = 0;
};

using ParameterStore = ParameterStoreT<float>;

}  // namespace pivotgen
