#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivotgen/autoencoder.hpp"
#include "pivotgen/autograd.hpp"
#include "pivotgen/checkpoint.hpp"
#include "pivotgen/nn.hpp"
#include "pivotgen/parallel.hpp"
#include "pivotgen/pivot.hpp"
#include "pivotgen/rng.hpp"

namespace pivotgen {

// Token id layout: PAD 0, START 1, END 2, 128 coordinate tokens, then the K
// codebook tokens. Coordinate tokens appear only in the pivot segment and
// codebook tokens only in the mesh segment.
struct Vocabulary {
    int codebook_size = 256;

    static constexpr int kPad = 0;
    static constexpr int kStart = 1;
    static constexpr int kEnd = 2;
    static constexpr int kCoordBase = 3;

    int code_base() const { return kCoordBase + kGridSize; }
    int size() const { return code_base() + codebook_size; }
    bool is_coord(int id) const { return id >= kCoordBase && id < code_base(); }
    bool is_code(int id) const { return id >= code_base() && id < size(); }
    int coord_token(int bin) const { return kCoordBase + bin; }
    int code_token(int code) const { return code_base() + code; }
    int coord_of(int id) const { return id - kCoordBase; }
    int code_of(int id) const { return id - code_base(); }
};

// [START] pivot coordinate tokens (z,y,x per pivot) [PAD] mesh tokens [END].
struct JointSequence {
    std::vector<int> tokens;
    bool complete = true;
};

inline JointSequence build_sequence(const PivotSet& pivots, const std::vector<int>& mesh_tokens,
                                    const Vocabulary& vocab, int max_seq_len = 0) {
    if (pivots.pivots.empty()) throw Error("build_sequence: empty pivot set");
    JointSequence seq;
    seq.tokens.reserve(3 * pivots.size() + mesh_tokens.size() + 3);
    seq.tokens.push_back(Vocabulary::kStart);
    for (const auto& p : pivots.pivots) {
        seq.tokens.push_back(vocab.coord_token(p[2]));
        seq.tokens.push_back(vocab.coord_token(p[1]));
        seq.tokens.push_back(vocab.coord_token(p[0]));
    }
    seq.tokens.push_back(Vocabulary::kPad);
    for (int t : mesh_tokens) {
        if (t < 0 || t >= vocab.codebook_size) throw Error("build_sequence: code out of range");
        seq.tokens.push_back(vocab.code_token(t));
    }
    seq.tokens.push_back(Vocabulary::kEnd);
    if (max_seq_len > 0 && static_cast<int>(seq.tokens.size()) > max_seq_len)
        throw Error("build_sequence: sequence exceeds max length");
    return seq;
}

struct SequenceParts {
    PivotSet pivots;
    std::vector<int> mesh_codes;
};

// Splits at the single PAD separator and validates the layout; residual_depth
// fixes the mesh-segment granularity.
inline SequenceParts parse_sequence(const JointSequence& seq, const Vocabulary& vocab, int residual_depth) {
    const auto& t = seq.tokens;
    if (t.size() < 3 || t.front() != Vocabulary::kStart || t.back() != Vocabulary::kEnd)
        throw Error("sequence: missing START/END frame");
    std::size_t pad = 0, pad_count = 0;
    for (std::size_t i = 1; i + 1 < t.size(); ++i) {
        if (t[i] == Vocabulary::kPad) {
            pad = i;
            ++pad_count;
        } else if (t[i] == Vocabulary::kStart || t[i] == Vocabulary::kEnd) {
            throw Error("sequence: interior START/END");
        }
    }
    if (pad_count != 1) throw Error("sequence: expected exactly one PAD separator");

    SequenceParts parts;
    std::size_t pivot_len = pad - 1;
    if (pivot_len == 0 || pivot_len % 3 != 0) throw Error("sequence: pivot segment length not a positive multiple of 3");
    for (std::size_t i = 1; i < pad; i += 3) {
        for (int a = 0; a < 3; ++a)
            if (!vocab.is_coord(t[i + a])) throw Error("sequence: non-coordinate token in pivot segment");
        // Emission order is z,y,x; stored triple is (x,y,z).
        parts.pivots.pivots.push_back({vocab.coord_of(t[i + 2]), vocab.coord_of(t[i + 1]), vocab.coord_of(t[i])});
    }
    std::size_t mesh_len = t.size() - pad - 2;
    if (mesh_len == 0 || mesh_len % static_cast<std::size_t>(3 * residual_depth) != 0)
        throw Error("sequence: mesh segment length not a positive multiple of 3r");
    for (std::size_t i = pad + 1; i + 1 < t.size(); ++i) {
        if (!vocab.is_code(t[i])) throw Error("sequence: non-codebook token in mesh segment");
        parts.mesh_codes.push_back(vocab.code_of(t[i]));
    }
    return parts;
}

struct GenConfig {
    int layers = 6;
    int hidden = 256;
    int max_seq_len = 1024;
    int codebook_size = 256;  // must match the tokenizer
    int residual_depth = 2;
    double temperature = 0.5;
    bool structural_mask = true;
    std::uint64_t seed = 1;
};

inline nlohmann::json gen_config_to_json(const GenConfig& c) {
    return {{"layers", c.layers},         {"hidden", c.hidden},
            {"max_seq_len", c.max_seq_len}, {"codebook_size", c.codebook_size},
            {"residual_depth", c.residual_depth}, {"temperature", c.temperature},
            {"structural_mask", c.structural_mask}, {"seed", c.seed}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig c;
    c.layers = j.at("layers");
    c.hidden = j.at("hidden");
    c.max_seq_len = j.at("max_seq_len");
    c.codebook_size = j.at("codebook_size");
    c.residual_depth = j.at("residual_depth");
    c.temperature = j.at("temperature");
    c.structural_mask = j.at("structural_mask");
    c.seed = j.at("seed");
    return c;
}

// Decoder-only causal transformer over joint pivot+mesh sequences with
// learned absolute positional encoding.
template <typename T>
class PivotGeneratorT {
public:
    GenConfig cfg;
    Vocabulary vocab;
    ParameterStoreT<T> store;

    explicit PivotGeneratorT(const GenConfig& config) : cfg(config) {
        vocab.codebook_size = cfg.codebook_size;
        Rng rng(mix64(cfg.seed, 0x9e4));
        store.add_normal("tok", {vocab.size(), cfg.hidden}, rng);
        store.add_normal("pos", {cfg.max_seq_len, cfg.hidden}, rng);
        for (int i = 0; i < cfg.layers; ++i)
            blocks_.push_back(TransformerBlockT<T>::create(store, "blk." + std::to_string(i), cfg.hidden,
                                                           true, rng));
        ln_ = LayerNormT<T>::create(store, "ln", cfg.hidden);
        head_ = LinearT<T>::create(store, "head", cfg.hidden, vocab.size(), rng);
    }

    static PivotGeneratorT from_checkpoint(const std::string& path) {
        auto loaded = load_checkpoint<T>(path);
        auto j = nlohmann::json::parse(loaded.meta);
        if (j.value("kind", "") != "gen") throw Error("checkpoint: not a generator checkpoint");
        PivotGeneratorT gen(gen_config_from_json(j.at("config")));
        if (gen.store.count() != loaded.store.count()) throw Error("checkpoint: parameter count mismatch");
        for (int i = 0; i < gen.store.count(); ++i) {
            auto& d = gen.store.entry(i);
            const auto& s = loaded.store.entry(loaded.store.index_of(d.name));
            if (s.value.shape != d.value.shape) throw Error("checkpoint: shape mismatch for " + d.name);
            d.value.data = s.value.data;
            if (d.trainable) {
                d.m1.data = s.m1.data;
                d.m2.data = s.m2.data;
            }
        }
        gen.store.set_step(loaded.store.step());
        return gen;
    }

    std::string meta() const {
        nlohmann::json j;
        j["kind"] = "gen";
        j["config"] = gen_config_to_json(cfg);
        return j.dump();
    }

    void save(const std::string& path) const { save_checkpoint(store, path, meta()); }

    Var forward_logits(GraphT<T>& g, const std::vector<int>& tokens) {
        int len = static_cast<int>(tokens.size());
        if (len > cfg.max_seq_len) throw Error("generator: sequence exceeds max length");
        for (int t : tokens)
            if (t < 0 || t >= vocab.size()) throw Error("generator: token id outside vocabulary");
        Var x = g.add(g.embedding(g.param(store, "tok"), tokens), g.slice_rows(g.param(store, "pos"), 0, len));
        for (const auto& blk : blocks_) x = blk(g, store, x);
        return head_(g, store, ln_(g, store, x));
    }

    struct SeqLoss {
        Var loss;
        int count = 0;
    };

    // Next-token cross entropy over the whole joint sequence (both Eq-style
    // factors); positions after END would be padding and are never scored.
    SeqLoss sequence_loss(GraphT<T>& g, const std::vector<int>& tokens) {
        if (tokens.size() < 2) throw Error("generator: sequence too short");
        std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
        std::vector<int> targets(tokens.begin() + 1, tokens.end());
        auto ce = g.cross_entropy(forward_logits(g, inputs), targets);
        return {ce.loss, ce.counted};
    }

    // Mean next-token loss over the batch; members run on independent tapes
    // and gradients are combined in member order (thread-count invariant).
    T train_step(const std::vector<const std::vector<int>*>& batch, const AdamWConfig& opt, int threads = 1) {
        std::size_t b = batch.size();
        std::vector<std::unique_ptr<GraphT<T>>> graphs(b);
        std::vector<SeqLoss> outs(b);
        parallel_for(b, threads, [&](std::size_t i) {
            graphs[i] = std::make_unique<GraphT<T>>(true);
            outs[i] = sequence_loss(*graphs[i], *batch[i]);
            graphs[i]->backward(outs[i].loss);
        });
        T total_count = T(0);
        for (auto& o : outs) total_count += static_cast<T>(o.count);
        store.zero_grads();
        T loss = T(0);
        for (std::size_t i = 0; i < b; ++i) {
            T w = static_cast<T>(outs[i].count) / total_count;
            graphs[i]->flush_grads(store, w);
            loss += graphs[i]->value(outs[i].loss)[0] * w;
        }
        store.adamw_step(opt);
        return loss;
    }

    // ---- sampling ----

    struct SampleResult {
        JointSequence seq;
        int steps = 0;
    };

    // Teacher-forces `prefix`, then samples until END or max_len total tokens.
    // Structurally illegal tokens are masked out (switchable via config).
    // temperature == 0 is exact greedy argmax with lowest-id tie break.
    SampleResult sample(const std::vector<int>& prefix, double temperature, Rng& rng, int max_len = 0) {
        if (max_len <= 0) max_len = cfg.max_seq_len;
        max_len = std::min(max_len, cfg.max_seq_len);
        if (prefix.empty() || prefix[0] != Vocabulary::kStart)
            throw Error("sample: prefix must begin with START");
        KvCache cache(cfg.layers, cfg.hidden);
        SampleResult res;
        res.seq.tokens = prefix;
        std::vector<T> logits;
        for (std::size_t i = 0; i + 1 < prefix.size(); ++i) step_token(cache, prefix[i], static_cast<int>(i), logits);
        int pos = static_cast<int>(prefix.size()) - 1;
        while (static_cast<int>(res.seq.tokens.size()) < max_len) {
            step_token(cache, res.seq.tokens[static_cast<std::size_t>(pos)], pos, logits);
            int next = pick_token(res.seq.tokens, logits, temperature, rng);
            res.seq.tokens.push_back(next);
            ++pos;
            ++res.steps;
            if (next == Vocabulary::kEnd) return res;
        }
        res.seq.complete = false;
        return res;
    }

    SampleResult sample_unconditional(double temperature, Rng& rng, int max_len = 0) {
        return sample({Vocabulary::kStart}, temperature, rng, max_len);
    }

    SampleResult sample_conditional(const PivotSet& pivots, double temperature, Rng& rng, int max_len = 0) {
        std::vector<int> prefix;
        prefix.push_back(Vocabulary::kStart);
        for (const auto& p : pivots.pivots) {
            for (int a : {p[2], p[1], p[0]}) {
                if (a < 0 || a >= kGridSize) throw Error("sample: pivot coordinate out of range");
                prefix.push_back(vocab.coord_token(a));
            }
        }
        prefix.push_back(Vocabulary::kPad);
        return sample(prefix, temperature, rng, max_len);
    }

private:
    struct KvCache {
        int layers, dim;
        // keys[l], values[l]: rows appended per position.
        std::vector<std::vector<T>> keys, values;
        KvCache(int l, int d) : layers(l), dim(d), keys(static_cast<std::size_t>(l)), values(static_cast<std::size_t>(l)) {}
    };

    // One incremental decode step; shares row kernels with the autodiff path
    // so teacher-forced logits are bitwise identical to forward_logits.
    void step_token(KvCache& cache, int token, int pos, std::vector<T>& logits) {
        if (pos >= cfg.max_seq_len) throw Error("sample: position exceeds positional table");
        int d = cfg.hidden;
        std::vector<T> x(static_cast<std::size_t>(d));
        {
            const T* tok = store["tok"].data.data() + static_cast<std::size_t>(token) * d;
            const T* pe = store["pos"].data.data() + static_cast<std::size_t>(pos) * d;
            for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] = tok[c] + pe[c];
        }
        std::vector<T> h(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d)), attn(static_cast<std::size_t>(d));
        std::vector<T> scores, mlp(static_cast<std::size_t>(4) * d);
        for (int l = 0; l < cfg.layers; ++l) {
            const auto& blk = blocks_[static_cast<std::size_t>(l)];
            auto& krows = cache.keys[static_cast<std::size_t>(l)];
            auto& vrows = cache.values[static_cast<std::size_t>(l)];
            kernels::layer_norm_row(x.data(), store[blk.ln1.gamma].data.data(), store[blk.ln1.beta].data.data(),
                                    h.data(), d, T(1e-5));
            std::size_t off = krows.size();
            krows.resize(off + static_cast<std::size_t>(d));
            vrows.resize(off + static_cast<std::size_t>(d));
            kernels::matvec_rowmajor(h.data(), store[blk.wq.w].data.data(), store[blk.wq.b].data.data(), q.data(), d, d);
            kernels::matvec_rowmajor(h.data(), store[blk.wk.w].data.data(), store[blk.wk.b].data.data(), krows.data() + off, d, d);
            kernels::matvec_rowmajor(h.data(), store[blk.wv.w].data.data(), store[blk.wv.b].data.data(), vrows.data() + off, d, d);

            int len = pos + 1;
            int dh = d / blk.heads;
            T scale = T(1) / std::sqrt(static_cast<T>(dh));
            scores.resize(static_cast<std::size_t>(len));
            std::fill(attn.begin(), attn.end(), T(0));
            for (int hd = 0; hd < blk.heads; ++hd) {
                int col = hd * dh;
                for (int j = 0; j < len; ++j)
                    scores[static_cast<std::size_t>(j)] =
                        kernels::dot(q.data() + col, krows.data() + static_cast<std::size_t>(j) * d + col, dh) * scale;
                kernels::softmax_row(scores.data(), len);
                T* out = attn.data() + col;
                for (int j = 0; j < len; ++j) {
                    T p = scores[static_cast<std::size_t>(j)];
                    const T* vj = vrows.data() + static_cast<std::size_t>(j) * d + col;
                    for (int c = 0; c < dh; ++c) out[c] += p * vj[c];
                }
            }
            kernels::matvec_rowmajor(attn.data(), store[blk.wo.w].data.data(), store[blk.wo.b].data.data(), h.data(), d, d);
            for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += h[static_cast<std::size_t>(c)];

            kernels::layer_norm_row(x.data(), store[blk.ln2.gamma].data.data(), store[blk.ln2.beta].data.data(),
                                    h.data(), d, T(1e-5));
            kernels::matvec_rowmajor(h.data(), store[blk.fc1.w].data.data(), store[blk.fc1.b].data.data(), mlp.data(), d, 4 * d);
            for (auto& v : mlp) v = kernels::gelu(v);
            kernels::matvec_rowmajor(mlp.data(), store[blk.fc2.w].data.data(), store[blk.fc2.b].data.data(), h.data(), 4 * d, d);
            for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += h[static_cast<std::size_t>(c)];
        }
        kernels::layer_norm_row(x.data(), store[ln_.gamma].data.data(), store[ln_.beta].data.data(), h.data(), d, T(1e-5));
        logits.resize(static_cast<std::size_t>(vocab.size()));
        kernels::matvec_rowmajor(h.data(), store[head_.w].data.data(), store[head_.b].data.data(), logits.data(), d,
                                 vocab.size());
    }

    struct MaskState {
        bool in_pivot = true;
        int pivot_len = 0;
        int mesh_len = 0;
    };

    MaskState mask_state(const std::vector<int>& tokens) const {
        MaskState st;
        for (std::size_t i = 1; i < tokens.size(); ++i) {
            if (tokens[i] == Vocabulary::kPad && st.in_pivot)
                st.in_pivot = false;
            else if (st.in_pivot)
                ++st.pivot_len;
            else
                ++st.mesh_len;
        }
        return st;
    }

    bool legal_token(int id, const MaskState& st) const {
        if (id == Vocabulary::kStart) return false;
        if (id == Vocabulary::kPad) return st.in_pivot && st.pivot_len > 0 && st.pivot_len % 3 == 0;
        if (vocab.is_coord(id)) return st.in_pivot;
        if (vocab.is_code(id)) return !st.in_pivot;
        if (id == Vocabulary::kEnd)
            return !st.in_pivot && st.mesh_len > 0 && st.mesh_len % (3 * cfg.residual_depth) == 0;
        return false;
    }

    int pick_token(const std::vector<int>& tokens, const std::vector<T>& logits, double temperature, Rng& rng) const {
        MaskState st = mask_state(tokens);
        int v = vocab.size();
        std::vector<char> legal(static_cast<std::size_t>(v), 1);
        if (cfg.structural_mask) {
            bool any = false;
            for (int id = 0; id < v; ++id) {
                legal[static_cast<std::size_t>(id)] = legal_token(id, st) ? 1 : 0;
                any = any || legal[static_cast<std::size_t>(id)];
            }
            if (!any) throw Error("sample: structural mask excluded every token");
        } else {
            legal[Vocabulary::kStart] = 0;
        }

        if (temperature <= 0.0) {
            int best = -1;
            for (int id = 0; id < v; ++id) {
                if (!legal[static_cast<std::size_t>(id)]) continue;
                if (best < 0 || logits[static_cast<std::size_t>(id)] > logits[static_cast<std::size_t>(best)]) best = id;
            }
            return best;
        }

        double mx = -std::numeric_limits<double>::infinity();
        for (int id = 0; id < v; ++id)
            if (legal[static_cast<std::size_t>(id)])
                mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(id)]) / temperature);
        std::vector<double> probs(static_cast<std::size_t>(v), 0.0);
        double sum = 0.0;
        for (int id = 0; id < v; ++id) {
            if (!legal[static_cast<std::size_t>(id)]) continue;
            probs[static_cast<std::size_t>(id)] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(id)]) / temperature - mx);
            sum += probs[static_cast<std::size_t>(id)];
        }
        double u = rng.uniform() * sum;
        double acc = 0.0;
        int last_legal = 0;
        for (int id = 0; id < v; ++id) {
            if (!legal[static_cast<std::size_t>(id)]) continue;
            acc += probs[static_cast<std::size_t>(id)];
            last_legal = id;
            if (u < acc) return id;
        }
        return last_legal;
    }

    std::vector<TransformerBlockT<T>> blocks_;
    LayerNormT<T> ln_;
    LinearT<T> head_;
};

using PivotGenerator = PivotGeneratorT<float>;

// Generated mesh segment -> quantized mesh through the auto-encoder's
// hierarchical decoder.
template <typename T>
struct DetokenizeResult {
    QuantizedMesh mesh;
    int dropped_faces = 0;
};

template <typename T>
DetokenizeResult<T> detokenize(const JointSequence& seq, MeshAutoEncoderT<T>& ae, const Vocabulary& vocab) {
    SequenceParts parts = parse_sequence(seq, vocab, ae.cfg.residual_depth);
    std::vector<T> latents = ae.codes_to_latents(parts.mesh_codes);
    int n = static_cast<int>(parts.mesh_codes.size()) / (3 * ae.cfg.residual_depth);
    FaceSequence pred = ae.decode_latents_greedy(latents, n);
    try {
        auto rebuilt = from_sequence(pred);
        return {rebuilt.mesh, rebuilt.dropped_faces};
    } catch (const Error&) {
        throw Error("generation collapsed: no valid faces after decoding");
    }
}

// Pivot-conditioned resampling of an existing mesh: select pivots (no
// dropping), sample the mesh segment, decode. Coarse-mesh refinement is the
// same procedure applied to a coarse input.
template <typename T>
DetokenizeResult<T> variation(const QuantizedMesh& mesh, MeshAutoEncoderT<T>& ae, PivotGeneratorT<T>& gen,
                              double eta_select, double temperature, Rng& rng, int max_len = 0) {
    QuantizedMesh canon = canonicalize(mesh);
    PivotSet pivots = select_pivots(canon, eta_select);
    auto sampled = gen.sample_conditional(pivots, temperature, rng, max_len);
    if (!sampled.seq.complete) throw Error("generation incomplete: hit max length");
    return detokenize(sampled.seq, ae, gen.vocab);
}

template <typename T>
DetokenizeResult<T> refine(const QuantizedMesh& coarse, MeshAutoEncoderT<T>& ae, PivotGeneratorT<T>& gen,
                           double eta_select, double temperature, Rng& rng, int max_len = 0) {
    return variation(coarse, ae, gen, eta_select, temperature, rng, max_len);
}

}  // namespace pivotgen
