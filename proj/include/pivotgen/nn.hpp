#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pivotgen/autograd.hpp"
#include "pivotgen/params.hpp"
#include "pivotgen/rng.hpp"

namespace pivotgen {

inline int heads_for(int hidden) { return std::max(1, hidden / 64); }

template <typename T>
struct LinearT {
    std::string w, b;
    int in = 0, out = 0;

    static LinearT create(ParameterStoreT<T>& s, const std::string& name, int in, int out, Rng& rng) {
        LinearT l{name + ".w", name + ".b", in, out};
        s.add_normal(l.w, {in, out}, rng);
        s.add(l.b, {out});
        return l;
    }

    Var operator()(GraphT<T>& g, ParameterStoreT<T>& s, Var x) const {
        return g.add_bias(g.matmul(x, g.param(s, w)), g.param(s, b));
    }
};

template <typename T>
struct LayerNormT {
    std::string gamma, beta;

    static LayerNormT create(ParameterStoreT<T>& s, const std::string& name, int dim) {
        LayerNormT n{name + ".g", name + ".b"};
        s.add_ones(n.gamma, {dim});
        s.add(n.beta, {dim});
        return n;
    }

    Var operator()(GraphT<T>& g, ParameterStoreT<T>& s, Var x) const {
        return g.layer_norm(x, g.param(s, gamma), g.param(s, beta));
    }
};

// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)). MLP expansion
// ratio 4, gelu activation.
template <typename T>
struct TransformerBlockT {
    LayerNormT<T> ln1, ln2;
    LinearT<T> wq, wk, wv, wo, fc1, fc2;
    int heads = 1;
    bool causal = false;

    static TransformerBlockT create(ParameterStoreT<T>& s, const std::string& name, int dim,
                                    bool causal, Rng& rng) {
        TransformerBlockT b;
        b.ln1 = LayerNormT<T>::create(s, name + ".ln1", dim);
        b.ln2 = LayerNormT<T>::create(s, name + ".ln2", dim);
        b.wq = LinearT<T>::create(s, name + ".wq", dim, dim, rng);
        b.wk = LinearT<T>::create(s, name + ".wk", dim, dim, rng);
        b.wv = LinearT<T>::create(s, name + ".wv", dim, dim, rng);
        b.wo = LinearT<T>::create(s, name + ".wo", dim, dim, rng);
        b.fc1 = LinearT<T>::create(s, name + ".fc1", dim, 4 * dim, rng);
        b.fc2 = LinearT<T>::create(s, name + ".fc2", 4 * dim, dim, rng);
        b.heads = heads_for(dim);
        b.causal = causal;
        return b;
    }

    Var operator()(GraphT<T>& g, ParameterStoreT<T>& s, Var x) const {
        Var h = ln1(g, s, x);
        Var core = g.attention_core(wq(g, s, h), wk(g, s, h), wv(g, s, h), heads, causal);
        x = g.add(x, wo(g, s, core));
        Var m = fc2(g, s, g.gelu(fc1(g, s, ln2(g, s, x))));
        return g.add(x, m);
    }
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int checked = 0;
};

// Central finite differences against the autodiff gradient on a random
// subsample of at least 64 scalar parameters per tensor (all of them for
// smaller tensors). The forward closure must be deterministic.
template <typename T>
GradCheckReport grad_check(ParameterStoreT<T>& store,
                           const std::function<Var(GraphT<T>&)>& build_loss,
                           double epsilon, Rng& rng, int per_tensor = 64) {
    GraphT<T> g(true);
    Var loss = build_loss(g);
    if (!std::isfinite(static_cast<double>(g.value(loss)[0])))
        throw Error("grad_check: non-finite loss");
    g.backward(loss);
    store.zero_grads();
    g.flush_grads(store);

    auto eval = [&]() -> double {
        GraphT<T> ge(false);
        return static_cast<double>(ge.value(build_loss(ge))[0]);
    };

    GradCheckReport report;
    for (int e = 0; e < store.count(); ++e) {
        auto& entry = store.entry(e);
        if (!entry.trainable) continue;
        std::size_t n = entry.value.size();
        std::vector<std::size_t> picks;
        if (n <= static_cast<std::size_t>(per_tensor)) {
            picks.resize(n);
            for (std::size_t i = 0; i < n; ++i) picks[i] = i;
        } else {
            std::vector<std::size_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            for (int t = 0; t < per_tensor; ++t) {
                std::size_t j = static_cast<std::size_t>(t) + rng.uniform_int(n - static_cast<std::size_t>(t));
                std::swap(all[static_cast<std::size_t>(t)], all[j]);
                picks.push_back(all[static_cast<std::size_t>(t)]);
            }
        }
        bool has_grad = !entry.value.grad.empty();
        for (std::size_t i : picks) {
            double g_ad = has_grad ? static_cast<double>(entry.value.grad[i]) : 0.0;
            T saved = entry.value.data[i];
            entry.value.data[i] = saved + static_cast<T>(epsilon);
            double lp = eval();
            entry.value.data[i] = saved - static_cast<T>(epsilon);
            double lm = eval();
            entry.value.data[i] = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm)) throw Error("grad_check: non-finite loss");
            double g_fd = (lp - lm) / (2.0 * epsilon);
            double rel = std::abs(g_ad - g_fd) / std::max({std::abs(g_ad), std::abs(g_fd), 1e-8});
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = entry.name;
            }
        }
    }
    return report;
}

}  // namespace pivotgen
