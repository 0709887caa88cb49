#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "pivotgen/params.hpp"
#include "pivotgen/tensor.hpp"

namespace pivotgen {

using Var = int;

// Reverse-mode tape. Every op appends a node holding its value and, when
// gradients are enabled, a closure that scatters the node's grad back into
// its inputs. One tape per forward pass; batch members use separate tapes
// and their leaf grads are summed into the store in member order.
template <typename T>
class GraphT {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<T> value;
        std::vector<T> grad;
        std::function<void(GraphT&)> back;
        bool needs_grad = false;
    };

    explicit GraphT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v)]; }
    const std::vector<T>& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
    const std::vector<T>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].grad; }
    const std::vector<int>& shape(Var v) const { return nodes_[static_cast<std::size_t>(v)].shape; }
    std::size_t rows(Var v) const { return static_cast<std::size_t>(shape(v)[0]); }
    int cols(Var v) const { return shape(v).size() > 1 ? shape(v)[1] : 1; }

    Var leaf(std::vector<int> shape, std::vector<T> value, bool needs_grad) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.needs_grad = needs_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    Var constant(std::vector<int> shape, std::vector<T> value) {
        return leaf(std::move(shape), std::move(value), false);
    }

    // Binds a store parameter as a leaf (cached per graph, so a parameter used
    // twice accumulates into a single leaf).
    Var param(ParameterStoreT<T>& store, const std::string& name) {
        int idx = store.index_of(name);
        auto it = bound_.find(idx);
        if (it != bound_.end()) return it->second;
        const auto& e = store.entry(idx);
        Var v = leaf(e.value.shape, e.value.data, e.trainable);
        bound_[idx] = v;
        bound_list_.emplace_back(idx, v);
        return v;
    }

    // Adds scale * leaf-grad into the store's grad buffers.
    void flush_grads(ParameterStoreT<T>& store, T scale = T(1)) {
        for (auto [idx, var] : bound_list_) {
            auto& e = store.entry(idx);
            if (!e.trainable) continue;
            const auto& g = nodes_[static_cast<std::size_t>(var)].grad;
            if (g.empty()) continue;
            e.value.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) e.value.grad[i] += scale * g[i];
        }
    }

    // ---- ops ----

    Var matmul(Var a, Var b) {
        int m = shape(a)[0], k = shape(a)[1];
        check(shape(b)[0] == k, "matmul", a, b);
        int n = shape(b)[1];
        std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
        kernels::matmul_acc(val(a), val(b), out.data(), m, k, n);
        return make({m, n}, std::move(out), {a, b}, [a, b, m, k, n](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            if (g.wants(a)) {
                auto bt = kernels::transpose(g.val(b), k, n);
                kernels::matmul_acc(go, bt.data(), g.mut_grad(a), m, n, k);
            }
            if (g.wants(b)) {
                auto at = kernels::transpose(g.val(a), m, k);
                kernels::matmul_acc(at.data(), go, g.mut_grad(b), k, m, n);
            }
        });
    }

    Var add(Var a, Var b) {
        check(shape(a) == shape(b), "add", a, b);
        std::vector<T> out(value(a));
        const T* bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return make(shape(a), std::move(out), {a, b}, [a, b](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            std::size_t n = g.value(g.out_).size();
            if (g.wants(a)) {
                T* da = g.mut_grad(a);
                for (std::size_t i = 0; i < n; ++i) da[i] += go[i];
            }
            if (g.wants(b)) {
                T* db = g.mut_grad(b);
                for (std::size_t i = 0; i < n; ++i) db[i] += go[i];
            }
        });
    }

    Var sub(Var a, Var b) {
        check(shape(a) == shape(b), "sub", a, b);
        std::vector<T> out(value(a));
        const T* bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return make(shape(a), std::move(out), {a, b}, [a, b](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            std::size_t n = g.value(g.out_).size();
            if (g.wants(a)) {
                T* da = g.mut_grad(a);
                for (std::size_t i = 0; i < n; ++i) da[i] += go[i];
            }
            if (g.wants(b)) {
                T* db = g.mut_grad(b);
                for (std::size_t i = 0; i < n; ++i) db[i] -= go[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        check(shape(a) == shape(b), "mul", a, b);
        std::vector<T> out(value(a));
        const T* bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return make(shape(a), std::move(out), {a, b}, [a, b](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            std::size_t n = g.value(g.out_).size();
            if (g.wants(a)) {
                T* da = g.mut_grad(a);
                const T* vb = g.val(b);
                for (std::size_t i = 0; i < n; ++i) da[i] += go[i] * vb[i];
            }
            if (g.wants(b)) {
                T* db = g.mut_grad(b);
                const T* va = g.val(a);
                for (std::size_t i = 0; i < n; ++i) db[i] += go[i] * va[i];
            }
        });
    }

    Var scale(Var a, T c) {
        std::vector<T> out(value(a));
        for (auto& v : out) v *= c;
        return make(shape(a), std::move(out), {a}, [a, c](GraphT& g) {
            if (!g.wants(a)) return;
            const T* go = g.val_grad(g.out_);
            T* da = g.mut_grad(a);
            for (std::size_t i = 0; i < g.value(g.out_).size(); ++i) da[i] += c * go[i];
        });
    }

    // x[m,n] + row vector b[n]
    Var add_bias(Var a, Var b) {
        int m = shape(a)[0], n = shape(a)[1];
        check(static_cast<int>(value(b).size()) == n, "add_bias", a, b);
        std::vector<T> out(value(a));
        const T* bv = val(b);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += bv[j];
        return make({m, n}, std::move(out), {a, b}, [a, b, m, n](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            if (g.wants(a)) {
                T* da = g.mut_grad(a);
                for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) da[i] += go[i];
            }
            if (g.wants(b)) {
                T* db = g.mut_grad(b);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) db[j] += go[static_cast<std::size_t>(i) * n + j];
            }
        });
    }

    // Row-major relayout; the flat buffer is unchanged.
    Var reshape(Var a, std::vector<int> new_shape) {
        check(TensorT<T>::count(new_shape) == value(a).size(), "reshape", a, a);
        std::vector<T> out(value(a));
        return make(std::move(new_shape), std::move(out), {a}, [a](GraphT& g) {
            if (!g.wants(a)) return;
            const T* go = g.val_grad(g.out_);
            T* da = g.mut_grad(a);
            for (std::size_t i = 0; i < g.value(g.out_).size(); ++i) da[i] += go[i];
        });
    }

    Var concat_cols(const std::vector<Var>& xs) {
        int m = shape(xs[0])[0];
        int total = 0;
        for (Var x : xs) {
            check(shape(x)[0] == m, "concat_cols", xs[0], x);
            total += shape(x)[1];
        }
        std::vector<T> out(static_cast<std::size_t>(m) * total);
        int off = 0;
        for (Var x : xs) {
            int n = shape(x)[1];
            const T* xv = val(x);
            for (int i = 0; i < m; ++i)
                std::copy(xv + static_cast<std::size_t>(i) * n, xv + static_cast<std::size_t>(i) * n + n,
                          out.begin() + static_cast<std::size_t>(i) * total + off);
            off += n;
        }
        std::vector<Var> ins = xs;
        return make({m, total}, std::move(out), ins, [ins, m, total](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            int off = 0;
            for (Var x : ins) {
                int n = g.shape(x)[1];
                if (g.wants(x)) {
                    T* dx = g.mut_grad(x);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            dx[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(i) * total + off + j];
                }
                off += n;
            }
        });
    }

    Var slice_rows(Var a, int lo, int hi) {
        int n = shape(a)[1];
        std::vector<T> out(val(a) + static_cast<std::size_t>(lo) * n, val(a) + static_cast<std::size_t>(hi) * n);
        return make({hi - lo, n}, std::move(out), {a}, [a, lo, n](GraphT& g) {
            if (!g.wants(a)) return;
            const T* go = g.val_grad(g.out_);
            T* da = g.mut_grad(a) + static_cast<std::size_t>(lo) * n;
            for (std::size_t i = 0; i < g.value(g.out_).size(); ++i) da[i] += go[i];
        });
    }

    Var embedding(Var table, const std::vector<int>& ids) {
        int v = shape(table)[0], d = shape(table)[1];
        int m = static_cast<int>(ids.size());
        std::vector<T> out(static_cast<std::size_t>(m) * d);
        for (int i = 0; i < m; ++i) {
            if (ids[i] < 0 || ids[i] >= v) throw Error("embedding: id out of range");
            std::copy(val(table) + static_cast<std::size_t>(ids[i]) * d,
                      val(table) + static_cast<std::size_t>(ids[i]) * d + d,
                      out.begin() + static_cast<std::size_t>(i) * d);
        }
        auto ids_copy = std::make_shared<std::vector<int>>(ids);
        return make({m, d}, std::move(out), {table}, [table, ids_copy, d](GraphT& g) {
            if (!g.wants(table)) return;
            const T* go = g.val_grad(g.out_);
            T* dt = g.mut_grad(table);
            for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                T* row = dt + static_cast<std::size_t>((*ids_copy)[i]) * d;
                const T* gr = go + i * d;
                for (int j = 0; j < d; ++j) row[j] += gr[j];
            }
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        int m = shape(x)[0], d = shape(x)[1];
        std::vector<T> out(static_cast<std::size_t>(m) * d);
        for (int i = 0; i < m; ++i)
            kernels::layer_norm_row(val(x) + static_cast<std::size_t>(i) * d, val(gamma), val(beta),
                                    out.data() + static_cast<std::size_t>(i) * d, d, eps);
        return make({m, d}, std::move(out), {x, gamma, beta}, [x, gamma, beta, m, d, eps](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            const T* xv = g.val(x);
            const T* gam = g.val(gamma);
            for (int i = 0; i < m; ++i) {
                const T* xr = xv + static_cast<std::size_t>(i) * d;
                const T* gr = go + static_cast<std::size_t>(i) * d;
                T mean = T(0);
                for (int j = 0; j < d; ++j) mean += xr[j];
                mean /= T(d);
                T var = T(0);
                for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= T(d);
                T inv = T(1) / std::sqrt(var + eps);
                T sum1 = T(0), sum2 = T(0);
                for (int j = 0; j < d; ++j) {
                    T xhat = (xr[j] - mean) * inv;
                    T dxhat = gr[j] * gam[j];
                    sum1 += dxhat;
                    sum2 += dxhat * xhat;
                }
                if (g.wants(x)) {
                    T* dx = g.mut_grad(x) + static_cast<std::size_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        T xhat = (xr[j] - mean) * inv;
                        T dxhat = gr[j] * gam[j];
                        dx[j] += inv * (dxhat - sum1 / T(d) - xhat * sum2 / T(d));
                    }
                }
                if (g.wants(gamma)) {
                    T* dg = g.mut_grad(gamma);
                    for (int j = 0; j < d; ++j) dg[j] += gr[j] * (xr[j] - mean) * inv;
                }
                if (g.wants(beta)) {
                    T* db = g.mut_grad(beta);
                    for (int j = 0; j < d; ++j) db[j] += gr[j];
                }
            }
        });
    }

    Var gelu(Var x) {
        std::vector<T> out(value(x));
        for (auto& v : out) v = kernels::gelu(v);
        return make(shape(x), std::move(out), {x}, [x](GraphT& g) {
            if (!g.wants(x)) return;
            const T* go = g.val_grad(g.out_);
            const T* xv = g.val(x);
            T* dx = g.mut_grad(x);
            for (std::size_t i = 0; i < g.value(g.out_).size(); ++i)
                dx[i] += go[i] * kernels::gelu_grad(xv[i]);
        });
    }

    Var softmax(Var x) {
        int m = shape(x)[0], d = shape(x)[1];
        std::vector<T> out(value(x));
        for (int i = 0; i < m; ++i) kernels::softmax_row(out.data() + static_cast<std::size_t>(i) * d, d);
        return make({m, d}, std::move(out), {x}, [x, m, d](GraphT& g) {
            if (!g.wants(x)) return;
            const T* go = g.val_grad(g.out_);
            const T* p = g.val(g.out_);
            T* dx = g.mut_grad(x);
            for (int i = 0; i < m; ++i) {
                const T* pr = p + static_cast<std::size_t>(i) * d;
                const T* gr = go + static_cast<std::size_t>(i) * d;
                T dotgp = T(0);
                for (int j = 0; j < d; ++j) dotgp += gr[j] * pr[j];
                T* dr = dx + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) dr[j] += pr[j] * (gr[j] - dotgp);
            }
        });
    }

    // Multi-head scaled-dot attention over q,k,v [L,d]; causal masks j > i.
    // Head h reads columns [h*dh, (h+1)*dh). Projections live outside.
    Var attention_core(Var q, Var k, Var v, int heads, bool causal) {
        int L = shape(q)[0], d = shape(q)[1];
        check(shape(k) == shape(q) && shape(v) == shape(q), "attention_core", q, k);
        if (d % heads != 0) throw Error("attention_core: width not divisible by heads");
        int dh = d / heads;
        T scale = T(1) / std::sqrt(static_cast<T>(dh));
        auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(heads) * L * L, T(0));
        std::vector<T> out(static_cast<std::size_t>(L) * d, T(0));
        for (int h = 0; h < heads; ++h) {
            int col = h * dh;
            for (int i = 0; i < L; ++i) {
                int limit = causal ? i + 1 : L;
                T* prow = probs->data() + (static_cast<std::size_t>(h) * L + i) * L;
                const T* qi = val(q) + static_cast<std::size_t>(i) * d + col;
                for (int j = 0; j < limit; ++j)
                    prow[j] = kernels::dot(qi, val(k) + static_cast<std::size_t>(j) * d + col, dh) * scale;
                kernels::softmax_row(prow, limit);
                T* oi = out.data() + static_cast<std::size_t>(i) * d + col;
                for (int j = 0; j < limit; ++j) {
                    T p = prow[j];
                    const T* vj = val(v) + static_cast<std::size_t>(j) * d + col;
                    for (int c = 0; c < dh; ++c) oi[c] += p * vj[c];
                }
            }
        }
        return make({L, d}, std::move(out), {q, k, v},
                    [q, k, v, heads, causal, L, d, dh, scale, probs](GraphT& g) {
            const T* go = g.val_grad(g.out_);
            std::vector<T> dp(static_cast<std::size_t>(L), T(0));
            for (int h = 0; h < heads; ++h) {
                int col = h * dh;
                for (int i = 0; i < L; ++i) {
                    int limit = causal ? i + 1 : L;
                    const T* prow = probs->data() + (static_cast<std::size_t>(h) * L + i) * L;
                    const T* gi = go + static_cast<std::size_t>(i) * d + col;
                    // dp_j = <g_i, v_j>, then softmax backward to scores.
                    T dotpp = T(0);
                    for (int j = 0; j < limit; ++j) {
                        dp[static_cast<std::size_t>(j)] = kernels::dot(gi, g.val(v) + static_cast<std::size_t>(j) * d + col, dh);
                        dotpp += dp[static_cast<std::size_t>(j)] * prow[j];
                    }
                    for (int j = 0; j < limit; ++j) {
                        T ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dotpp) * scale;
                        if (g.wants(q)) {
                            T* dq = g.mut_grad(q) + static_cast<std::size_t>(i) * d + col;
                            const T* kj = g.val(k) + static_cast<std::size_t>(j) * d + col;
                            for (int c = 0; c < dh; ++c) dq[c] += ds * kj[c];
                        }
                        if (g.wants(k)) {
                            T* dk = g.mut_grad(k) + static_cast<std::size_t>(j) * d + col;
                            const T* qi = g.val(q) + static_cast<std::size_t>(i) * d + col;
                            for (int c = 0; c < dh; ++c) dk[c] += ds * qi[c];
                        }
                        if (g.wants(v)) {
                            T* dv = g.mut_grad(v) + static_cast<std::size_t>(j) * d + col;
                            for (int c = 0; c < dh; ++c) dv[c] += prow[j] * gi[c];
                        }
                    }
                }
            }
        });
    }

    struct CrossEntropyOut {
        Var loss;
        int counted;
    };

    // Mean next-token / coordinate cross entropy; targets == ignore_index are
    // excluded from both the mean and the gradient.
    CrossEntropyOut cross_entropy(Var logits, const std::vector<int>& targets, int ignore_index = -1) {
        int m = shape(logits)[0], vdim = shape(logits)[1];
        if (static_cast<int>(targets.size()) != m) throw Error("cross_entropy: target count mismatch");
        auto probs = std::make_shared<std::vector<T>>(value(logits));
        int counted = 0;
        T total = T(0);
        for (int i = 0; i < m; ++i) {
            T* row = probs->data() + static_cast<std::size_t>(i) * vdim;
            if (targets[i] == ignore_index) continue;
            if (targets[i] < 0 || targets[i] >= vdim) throw Error("cross_entropy: target out of range");
            T mx = row[0];
            for (int j = 1; j < vdim; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < vdim; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (int j = 0; j < vdim; ++j) row[j] /= sum;
            total += -std::log(std::max(row[targets[i]], std::numeric_limits<T>::min()));
            ++counted;
        }
        if (counted == 0) throw Error("cross_entropy: no targets to average");
        auto tgt = std::make_shared<std::vector<int>>(targets);
        Var loss = make({1}, {total / static_cast<T>(counted)}, {logits},
                        [logits, probs, tgt, vdim, counted, ignore_index](GraphT& g) {
            if (!g.wants(logits)) return;
            T go = g.val_grad(g.out_)[0] / static_cast<T>(counted);
            T* dl = g.mut_grad(logits);
            for (std::size_t i = 0; i < tgt->size(); ++i) {
                if ((*tgt)[i] == ignore_index) continue;
                const T* pr = probs->data() + i * vdim;
                T* dr = dl + i * vdim;
                for (int j = 0; j < vdim; ++j) dr[j] += go * pr[j];
                dr[(*tgt)[i]] -= go;
            }
        });
        return {loss, counted};
    }

    Var sum_all(Var x) {
        T s = T(0);
        for (T v : value(x)) s += v;
        return make({1}, {s}, {x}, [x](GraphT& g) {
            if (!g.wants(x)) return;
            T go = g.val_grad(g.out_)[0];
            T* dx = g.mut_grad(x);
            for (std::size_t i = 0; i < g.value(x).size(); ++i) dx[i] += go;
        });
    }

    Var mean_all(Var x) {
        return scale(sum_all(x), T(1) / static_cast<T>(value(x).size()));
    }

    // mean((a-b)^2) over all elements; the commitment term uses this with b
    // as a constant leaf (detached quantizer output).
    Var mean_sq_diff(Var a, Var b) {
        check(shape(a) == shape(b), "mean_sq_diff", a, b);
        std::size_t n = value(a).size();
        T s = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            T d = value(a)[i] - value(b)[i];
            s += d * d;
        }
        return make({1}, {s / static_cast<T>(n)}, {a, b}, [a, b, n](GraphT& g) {
            T go = g.val_grad(g.out_)[0] * T(2) / static_cast<T>(n);
            const T* av = g.val(a);
            const T* bv = g.val(b);
            if (g.wants(a)) {
                T* da = g.mut_grad(a);
                for (std::size_t i = 0; i < n; ++i) da[i] += go * (av[i] - bv[i]);
            }
            if (g.wants(b)) {
                T* db = g.mut_grad(b);
                for (std::size_t i = 0; i < n; ++i) db[i] -= go * (av[i] - bv[i]);
            }
        });
    }

    // Straight-through hop: forward takes the provided values, backward
    // passes the gradient to x unchanged.
    Var st_passthrough(Var x, std::vector<T> values) {
        check(values.size() == value(x).size(), "st_passthrough", x, x);
        return make(shape(x), std::move(values), {x}, [x](GraphT& g) {
            if (!g.wants(x)) return;
            const T* go = g.val_grad(g.out_);
            T* dx = g.mut_grad(x);
            for (std::size_t i = 0; i < g.value(g.out_).size(); ++i) dx[i] += go[i];
        });
    }

    // out_i = mean of x over neighbors(i), zero vector when i has none.
    Var neighbor_mean(Var x, const std::vector<std::vector<int>>& neighbors) {
        int m = shape(x)[0], d = shape(x)[1];
        if (static_cast<int>(neighbors.size()) != m) throw Error("neighbor_mean: adjacency size mismatch");
        std::vector<T> out(static_cast<std::size_t>(m) * d, T(0));
        for (int i = 0; i < m; ++i) {
            if (neighbors[static_cast<std::size_t>(i)].empty()) continue;
            T inv = T(1) / static_cast<T>(neighbors[static_cast<std::size_t>(i)].size());
            T* oi = out.data() + static_cast<std::size_t>(i) * d;
            for (int j : neighbors[static_cast<std::size_t>(i)]) {
                const T* xj = val(x) + static_cast<std::size_t>(j) * d;
                for (int c = 0; c < d; ++c) oi[c] += xj[c];
            }
            for (int c = 0; c < d; ++c) oi[c] *= inv;
        }
        auto adj = std::make_shared<std::vector<std::vector<int>>>(neighbors);
        return make({m, d}, std::move(out), {x}, [x, adj, m, d](GraphT& g) {
            if (!g.wants(x)) return;
            const T* go = g.val_grad(g.out_);
            T* dx = g.mut_grad(x);
            for (int i = 0; i < m; ++i) {
                const auto& ns = (*adj)[static_cast<std::size_t>(i)];
                if (ns.empty()) continue;
                T inv = T(1) / static_cast<T>(ns.size());
                const T* gi = go + static_cast<std::size_t>(i) * d;
                for (int j : ns) {
                    T* dj = dx + static_cast<std::size_t>(j) * d;
                    for (int c = 0; c < d; ++c) dj[c] += gi[c] * inv;
                }
            }
        });
    }

    // Rows sharing a group id are replaced by their group mean.
    Var scatter_mean(Var x, const std::vector<int>& groups, int n_groups) {
        int m = shape(x)[0], d = shape(x)[1];
        if (static_cast<int>(groups.size()) != m) throw Error("scatter_mean: group count mismatch");
        std::vector<T> sums(static_cast<std::size_t>(n_groups) * d, T(0));
        std::vector<int> counts(static_cast<std::size_t>(n_groups), 0);
        for (int i = 0; i < m; ++i) {
            const T* xi = val(x) + static_cast<std::size_t>(i) * d;
            T* srow = sums.data() + static_cast<std::size_t>(groups[i]) * d;
            for (int c = 0; c < d; ++c) srow[c] += xi[c];
            ++counts[static_cast<std::size_t>(groups[i])];
        }
        std::vector<T> out(static_cast<std::size_t>(m) * d);
        for (int i = 0; i < m; ++i) {
            const T* srow = sums.data() + static_cast<std::size_t>(groups[i]) * d;
            T inv = T(1) / static_cast<T>(counts[static_cast<std::size_t>(groups[i])]);
            T* oi = out.data() + static_cast<std::size_t>(i) * d;
            for (int c = 0; c < d; ++c) oi[c] = srow[c] * inv;
        }
        auto grp = std::make_shared<std::vector<int>>(groups);
        auto cnt = std::make_shared<std::vector<int>>(counts);
        return make({m, d}, std::move(out), {x}, [x, grp, cnt, m, d](GraphT& g) {
            if (!g.wants(x)) return;
            const T* go = g.val_grad(g.out_);
            std::vector<T> gsum(static_cast<std::size_t>(cnt->size()) * d, T(0));
            for (int i = 0; i < m; ++i) {
                const T* gi = go + static_cast<std::size_t>(i) * d;
                T* srow = gsum.data() + static_cast<std::size_t>((*grp)[i]) * d;
                for (int c = 0; c < d; ++c) srow[c] += gi[c];
            }
            T* dx = g.mut_grad(x);
            for (int i = 0; i < m; ++i) {
                T inv = T(1) / static_cast<T>((*cnt)[static_cast<std::size_t>((*grp)[i])]);
                const T* srow = gsum.data() + static_cast<std::size_t>((*grp)[i]) * d;
                T* di = dx + static_cast<std::size_t>(i) * d;
                for (int c = 0; c < d; ++c) di[c] += srow[c] * inv;
            }
        });
    }

    Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

    // ---- backward ----

    void backward(Var loss) {
        if (!grad_enabled_) throw Error("backward: gradients disabled on this graph");
        if (value(loss).size() != 1) throw Error("backward: loss must be scalar");
        for (auto& n : nodes_)
            if (n.needs_grad) n.grad.assign(n.value.size(), T(0));
        auto& ln = nodes_[static_cast<std::size_t>(loss)];
        if (!ln.needs_grad) return;  // loss does not depend on any parameter
        ln.grad[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.needs_grad) {
                out_ = i;
                n.back(*this);
            }
        }
    }

private:
    const T* val(Var v) const { return nodes_[static_cast<std::size_t>(v)].value.data(); }
    const T* val_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].grad.data(); }
    T* mut_grad(Var v) { return nodes_[static_cast<std::size_t>(v)].grad.data(); }
    bool wants(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

    void check(bool ok, const char* op, Var a, Var b) const {
        if (ok) return;
        auto fmt = [&](Var v) {
            std::string s = "[";
            for (std::size_t i = 0; i < shape(v).size(); ++i)
                s += (i ? "," : "") + std::to_string(shape(v)[i]);
            return s + "]";
        };
        throw Error(std::string("shape mismatch in ") + op + ": " + fmt(a) + " vs " + fmt(b));
    }

    Var make(std::vector<int> shape, std::vector<T> value, const std::vector<Var>& inputs,
             std::function<void(GraphT&)> back) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(in)].needs_grad;
        if (grad_enabled_ && n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::map<int, Var> bound_;
    std::vector<std::pair<int, Var>> bound_list_;
    bool grad_enabled_;
    Var out_ = -1;  // node whose closure is currently running
};

using Graph = GraphT<float>;

}  // namespace pivotgen
