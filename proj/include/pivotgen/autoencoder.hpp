#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivotgen/autograd.hpp"
#include "pivotgen/checkpoint.hpp"
#include "pivotgen/mesh.hpp"
#include "pivotgen/nn.hpp"
#include "pivotgen/parallel.hpp"
#include "pivotgen/params.hpp"
#include "pivotgen/rng.hpp"

namespace pivotgen {

struct AEConfig {
    int hidden_enc = 128;
    int layers_enc = 4;
    int hidden_facedec = 128;
    int layers_facedec = 3;
    int hidden_vertdec = 128;
    int layers_vertdec = 3;
    int codebook_size = 256;   // K
    int codebook_dim = 64;
    int residual_depth = 2;    // r
    double ema_decay = 0.99;
    double commitment_weight = 0.25;
    int dead_code_steps = 200;  // revival threshold for unused codes
    int max_faces = 512;        // face-decoder positional table size
    bool use_vertex_decoder = true;  // false: face-level head only
    std::uint64_t seed = 1;
};

inline nlohmann::json ae_config_to_json(const AEConfig& c) {
    return {{"hidden_enc", c.hidden_enc},       {"layers_enc", c.layers_enc},
            {"hidden_facedec", c.hidden_facedec}, {"layers_facedec", c.layers_facedec},
            {"hidden_vertdec", c.hidden_vertdec}, {"layers_vertdec", c.layers_vertdec},
            {"codebook_size", c.codebook_size},  {"codebook_dim", c.codebook_dim},
            {"residual_depth", c.residual_depth}, {"ema_decay", c.ema_decay},
            {"commitment_weight", c.commitment_weight}, {"dead_code_steps", c.dead_code_steps},
            {"max_faces", c.max_faces},          {"use_vertex_decoder", c.use_vertex_decoder},
            {"seed", c.seed}};
}

inline AEConfig ae_config_from_json(const nlohmann::json& j) {
    AEConfig c;
    c.hidden_enc = j.at("hidden_enc");
    c.layers_enc = j.at("layers_enc");
    c.hidden_facedec = j.at("hidden_facedec");
    c.layers_facedec = j.at("layers_facedec");
    c.hidden_vertdec = j.at("hidden_vertdec");
    c.layers_vertdec = j.at("layers_vertdec");
    c.codebook_size = j.at("codebook_size");
    c.codebook_dim = j.at("codebook_dim");
    c.residual_depth = j.at("residual_depth");
    c.ema_decay = j.at("ema_decay");
    c.commitment_weight = j.at("commitment_weight");
    c.dead_code_steps = j.at("dead_code_steps");
    c.max_faces = j.at("max_faces");
    c.use_vertex_decoder = j.at("use_vertex_decoder");
    c.seed = j.at("seed");
    return c;
}

// Per-stage nearest-code assignments of one batch, in member order; feeds the
// EMA codebook update.
template <typename T>
struct StageAssignments {
    std::vector<int> codes;
    std::vector<T> inputs;  // the stage's residual inputs, row per assignment
};

template <typename T>
struct RvqValues {
    std::vector<int> tokens;              // 3nr, stage-innermost
    std::vector<T> quantized;             // [3n, dim] sum of selected codes
    std::vector<StageAssignments<T>> stages;
    std::vector<std::vector<T>> residual_norms;  // [stage][latent]
};

struct ReconstructionReport {
    QuantizedMesh mesh;
    double triangle_accuracy = 0.0;  // fraction in [0,1]
    double l2_e3 = 0.0;              // mean vertex L2 distance, x1e3
    int dropped_faces = 0;
};

// One training/eval sample: a canonical mesh with its flattened sequence.
struct MeshSample {
    std::string id;
    QuantizedMesh mesh;
    FaceSequence seq;
};

inline MeshSample make_sample(std::string id, const QuantizedMesh& mesh) {
    MeshSample s;
    s.id = std::move(id);
    s.mesh = mesh;
    s.seq = to_sequence(mesh);
    return s;
}

// Transformer auto-encoder with graph positional encoding, residual vector
// quantization on aggregated vertex embeddings, and face->vertex hierarchical
// decoding to per-axis coordinate logits.
template <typename T>
class MeshAutoEncoderT {
public:
    AEConfig cfg;
    ParameterStoreT<T> store;

    explicit MeshAutoEncoderT(const AEConfig& config) : cfg(config), revival_rng_(mix64(config.seed, 0x5eedc0de)) {
        Rng rng(mix64(cfg.seed, 0xae));
        coord_dim_ = std::max(4, cfg.hidden_enc / 8);
        store.add_normal("embed.coord", {3 * kGridSize, coord_dim_}, rng);
        normal_embed_ = LinearT<T>::create(store, "embed.normal", 3, coord_dim_, rng);
        area_embed_ = LinearT<T>::create(store, "embed.area", 1, coord_dim_, rng);
        input_proj_ = LinearT<T>::create(store, "embed.proj", 11 * coord_dim_, cfg.hidden_enc, rng);
        store.add_normal("gnn.w1", {cfg.hidden_enc, cfg.hidden_enc}, rng);
        store.add_normal("gnn.w2", {cfg.hidden_enc, cfg.hidden_enc}, rng);
        for (int i = 0; i < cfg.layers_enc; ++i)
            enc_blocks_.push_back(TransformerBlockT<T>::create(store, "enc." + std::to_string(i),
                                                               cfg.hidden_enc, false, rng));
        enc_ln_ = LayerNormT<T>::create(store, "enc.ln", cfg.hidden_enc);
        enc_out_ = LinearT<T>::create(store, "enc.out", cfg.hidden_enc, 3 * cfg.codebook_dim, rng);

        fuse_ = LinearT<T>::create(store, "dec.fuse", 3 * cfg.codebook_dim, cfg.hidden_facedec, rng);
        store.add_normal("dec.pos", {cfg.max_faces, cfg.hidden_facedec}, rng);
        for (int i = 0; i < cfg.layers_facedec; ++i)
            face_blocks_.push_back(TransformerBlockT<T>::create(store, "facedec." + std::to_string(i),
                                                                cfg.hidden_facedec, false, rng));
        face_ln_ = LayerNormT<T>::create(store, "facedec.ln", cfg.hidden_facedec);
        if (cfg.use_vertex_decoder) {
            expand1_ = LinearT<T>::create(store, "expand.fc1", cfg.hidden_facedec, cfg.hidden_facedec, rng);
            expand2_ = LinearT<T>::create(store, "expand.fc2", cfg.hidden_facedec, 3 * cfg.hidden_vertdec, rng);
            for (int i = 0; i < cfg.layers_vertdec; ++i)
                vert_blocks_.push_back(TransformerBlockT<T>::create(store, "vertdec." + std::to_string(i),
                                                                    cfg.hidden_vertdec, false, rng));
            vert_ln_ = LayerNormT<T>::create(store, "vertdec.ln", cfg.hidden_vertdec);
            head_ = LinearT<T>::create(store, "head", cfg.hidden_vertdec, 3 * kGridSize, rng);
        } else {
            head_ = LinearT<T>::create(store, "face_head", cfg.hidden_facedec, 9 * kGridSize, rng);
        }

        for (int s = 0; s < cfg.residual_depth; ++s) {
            std::string suffix = ".s" + std::to_string(s);
            TensorT<T>& cb = store.add("codebook" + suffix, {cfg.codebook_size, cfg.codebook_dim}, false);
            for (auto& v : cb.data) v = static_cast<T>(rng.normal() * 0.02);
            store.add("ema_count" + suffix, {cfg.codebook_size}, false);
            TensorT<T>& sums = store.add("ema_sum" + suffix, {cfg.codebook_size, cfg.codebook_dim}, false);
            for (std::size_t i = 0; i < sums.size(); ++i) sums.data[i] = cb.data[i] * T(1e-3);
            TensorT<T>& cnt = store["ema_count" + suffix];
            std::fill(cnt.data.begin(), cnt.data.end(), T(1e-3));
            store.add("stale" + suffix, {cfg.codebook_size}, false);
        }
    }

    static MeshAutoEncoderT from_checkpoint(const std::string& path) {
        auto loaded = load_checkpoint<T>(path);
        auto j = nlohmann::json::parse(loaded.meta);
        if (j.value("kind", "") != "ae") throw Error("checkpoint: not an auto-encoder checkpoint");
        MeshAutoEncoderT ae(ae_config_from_json(j.at("config")));
        adopt(ae.store, loaded.store);
        return ae;
    }

    std::string meta() const {
        nlohmann::json j;
        j["kind"] = "ae";
        j["config"] = ae_config_to_json(cfg);
        return j.dump();
    }

    void save(const std::string& path) const { save_checkpoint(store, path, meta()); }

    // ---- encoder ----

    // Per-face features: 9 coordinate embeddings (one shared 128-entry table
    // per axis), the face normal and log-area through learned linear maps,
    // concatenated and projected to the encoder width.
    Var embed_faces(GraphT<T>& g, const FaceSequence& seq, const QuantizedMesh& mesh) {
        int n = seq.face_count();
        std::vector<int> ids;
        ids.reserve(static_cast<std::size_t>(9) * n);
        for (std::size_t i = 0; i < seq.coords.size(); ++i) {
            int axis = static_cast<int>(i % 3);
            ids.push_back(axis * kGridSize + seq.coords[i]);
        }
        Var coords = g.reshape(g.embedding(g.param(store, "embed.coord"), ids), {n, 9 * coord_dim_});

        std::vector<T> normals(static_cast<std::size_t>(n) * 3);
        std::vector<T> areas(static_cast<std::size_t>(n));
        for (int f = 0; f < n; ++f) {
            FaceNormal fn = face_normal(mesh, f);
            for (int a = 0; a < 3; ++a) normals[static_cast<std::size_t>(f) * 3 + a] = static_cast<T>(fn.normal[a]);
            areas[static_cast<std::size_t>(f)] = static_cast<T>(std::log(std::max(face_area(mesh, f), 1e-12)));
        }
        Var nrm = normal_embed_(g, store, g.constant({n, 3}, std::move(normals)));
        Var ar = area_embed_(g, store, g.constant({n, 1}, std::move(areas)));
        return input_proj_(g, store, g.concat_cols({coords, nrm, ar}));
    }

    // Single message-passing layer over the face-adjacency graph, replacing
    // absolute positional encoding: h' = h*W1 + mean(neighbors)*W2.
    Var graph_positional(GraphT<T>& g, Var h, const QuantizedMesh& mesh) {
        auto adj = face_adjacency(mesh);
        Var self = g.matmul(h, g.param(store, "gnn.w1"));
        Var agg = g.matmul(g.neighbor_mean(h, adj), g.param(store, "gnn.w2"));
        return g.add(self, agg);
    }

    Var encode(GraphT<T>& g, const FaceSequence& seq, const QuantizedMesh& mesh) {
        Var h = graph_positional(g, embed_faces(g, seq, mesh), mesh);
        for (const auto& blk : enc_blocks_) h = blk(g, store, h);
        return enc_ln_(g, store, h);
    }

    // Face latents -> 3 per-vertex slots; slots that reference the same mesh
    // vertex are replaced by their mean, so shared vertices quantize
    // identically.
    Var split_and_aggregate(GraphT<T>& g, Var face_latents, const QuantizedMesh& mesh) {
        int n = static_cast<int>(mesh.faces.size());
        Var slots = g.reshape(enc_out_(g, store, face_latents), {3 * n, cfg.codebook_dim});
        std::vector<int> groups;
        groups.reserve(static_cast<std::size_t>(3) * n);
        for (const auto& f : mesh.faces)
            for (int idx : f) groups.push_back(idx);
        return g.scatter_mean(slots, groups, static_cast<int>(mesh.vertices.size()));
    }

    // Pure-value residual quantization; shared by the training graph and the
    // inference paths so assignments always agree.
    RvqValues<T> rvq_values(const std::vector<T>& latents, int rows) const {
        int dim = cfg.codebook_dim;
        RvqValues<T> out;
        out.tokens.reserve(static_cast<std::size_t>(rows) * cfg.residual_depth);
        out.quantized.assign(static_cast<std::size_t>(rows) * dim, T(0));
        out.stages.resize(static_cast<std::size_t>(cfg.residual_depth));
        out.residual_norms.assign(static_cast<std::size_t>(cfg.residual_depth), {});
        for (auto& v : latents)
            if (!std::isfinite(static_cast<double>(v))) throw Error("rvq: non-finite latent");

        std::vector<T> residual(dim);
        for (int i = 0; i < rows; ++i) {
            const T* z = latents.data() + static_cast<std::size_t>(i) * dim;
            std::copy(z, z + dim, residual.begin());
            for (int s = 0; s < cfg.residual_depth; ++s) {
                const TensorT<T>& cb = store["codebook.s" + std::to_string(s)];
                int best = 0;
                T best_d = std::numeric_limits<T>::max();
                for (int k = 0; k < cfg.codebook_size; ++k) {
                    const T* e = cb.data.data() + static_cast<std::size_t>(k) * dim;
                    T d = T(0);
                    for (int c = 0; c < dim; ++c) d += (residual[c] - e[c]) * (residual[c] - e[c]);
                    if (d < best_d) {
                        best_d = d;
                        best = k;
                    }
                }
                auto& st = out.stages[static_cast<std::size_t>(s)];
                st.codes.push_back(best);
                st.inputs.insert(st.inputs.end(), residual.begin(), residual.end());
                out.tokens.push_back(best);
                const T* e = cb.data.data() + static_cast<std::size_t>(best) * dim;
                T* q = out.quantized.data() + static_cast<std::size_t>(i) * dim;
                T norm = T(0);
                for (int c = 0; c < dim; ++c) {
                    q[c] += e[c];
                    residual[c] -= e[c];
                    norm += residual[c] * residual[c];
                }
                out.residual_norms[static_cast<std::size_t>(s)].push_back(std::sqrt(norm));
            }
        }
        return out;
    }

    struct RvqGraphOut {
        Var quantized;   // straight-through node
        Var commitment;  // scalar, gradient flows to the encoder only
        RvqValues<T> values;
    };

    RvqGraphOut rvq_encode(GraphT<T>& g, Var vertex_latents) {
        int rows = static_cast<int>(g.rows(vertex_latents));
        RvqValues<T> vals = rvq_values(g.value(vertex_latents), rows);
        Var zq = g.st_passthrough(vertex_latents, vals.quantized);
        Var detached = g.constant(g.shape(vertex_latents), vals.quantized);
        Var commit = g.mean_sq_diff(vertex_latents, detached);
        return {zq, commit, std::move(vals)};
    }

    // ---- decoder ----

    // Quantized vertex latents regrouped per face, decoded at face level with
    // learned absolute positions, expanded 1->3 by an MLP and decoded again at
    // vertex level; the head emits 128 logits per axis per vertex slot.
    Var decode_hierarchical(GraphT<T>& g, Var quantized, int n_faces) {
        if (static_cast<int>(g.rows(quantized)) != 3 * n_faces)
            throw Error("decode: latent count must be 3n");
        if (n_faces > cfg.max_faces) throw Error("decode: mesh exceeds positional table");
        Var h = fuse_(g, store, g.reshape(quantized, {n_faces, 3 * cfg.codebook_dim}));
        h = g.add(h, g.slice_rows(g.param(store, "dec.pos"), 0, n_faces));
        for (const auto& blk : face_blocks_) h = blk(g, store, h);
        h = face_ln_(g, store, h);
        if (!cfg.use_vertex_decoder) {
            Var logits = head_(g, store, h);  // [n, 9*128]
            return g.reshape(logits, {9 * n_faces, kGridSize});
        }
        Var v = expand2_(g, store, g.gelu(expand1_(g, store, h)));
        v = g.reshape(v, {3 * n_faces, cfg.hidden_vertdec});
        for (const auto& blk : vert_blocks_) v = blk(g, store, v);
        v = vert_ln_(g, store, v);
        return g.reshape(head_(g, store, v), {9 * n_faces, kGridSize});
    }

    struct LossOut {
        Var loss;
        Var reconstruction;
        Var commitment;
        RvqValues<T> rvq;
    };

    LossOut loss(GraphT<T>& g, const MeshSample& sample) {
        Var z = split_and_aggregate(g, encode(g, sample.seq, sample.mesh), sample.mesh);
        RvqGraphOut q = rvq_encode(g, z);
        Var logits = decode_hierarchical(g, q.quantized, sample.seq.face_count());
        Var ce = g.cross_entropy(logits, sample.seq.coords).loss;
        Var total = g.add(ce, g.scale(q.commitment, static_cast<T>(cfg.commitment_weight)));
        return {total, ce, q.commitment, std::move(q.values)};
    }

    // Smooth surrogate whose exact gradient is the straight-through training
    // gradient: the quantizer is frozen into an additive constant offset
    // c = q - z and a constant commitment target q, both captured at the base
    // point. Finite differences of this loss validate the whole path.
    Var loss_frozen_quantizer(GraphT<T>& g, const MeshSample& sample,
                              const std::vector<T>& offset, const std::vector<T>& q_base) {
        Var z = split_and_aggregate(g, encode(g, sample.seq, sample.mesh), sample.mesh);
        Var zq = g.add(z, g.constant(g.shape(z), offset));
        Var commit = g.mean_sq_diff(z, g.constant(g.shape(z), q_base));
        Var logits = decode_hierarchical(g, zq, sample.seq.face_count());
        Var ce = g.cross_entropy(logits, sample.seq.coords).loss;
        return g.add(ce, g.scale(commit, static_cast<T>(cfg.commitment_weight)));
    }

    // ---- EMA codebook ----

    void ema_update(const std::vector<const RvqValues<T>*>& batch) {
        int dim = cfg.codebook_dim;
        T decay = static_cast<T>(cfg.ema_decay);
        for (int s = 0; s < cfg.residual_depth; ++s) {
            std::string suffix = ".s" + std::to_string(s);
            TensorT<T>& cb = store["codebook" + suffix];
            TensorT<T>& count = store["ema_count" + suffix];
            TensorT<T>& sum = store["ema_sum" + suffix];
            TensorT<T>& stale = store["stale" + suffix];

            std::vector<T> bcount(static_cast<std::size_t>(cfg.codebook_size), T(0));
            std::vector<T> bsum(static_cast<std::size_t>(cfg.codebook_size) * dim, T(0));
            std::size_t pool_rows = 0;
            for (const auto* rv : batch) {
                const auto& st = rv->stages[static_cast<std::size_t>(s)];
                pool_rows += st.codes.size();
                for (std::size_t i = 0; i < st.codes.size(); ++i) {
                    int k = st.codes[i];
                    bcount[static_cast<std::size_t>(k)] += T(1);
                    const T* in = st.inputs.data() + i * dim;
                    T* row = bsum.data() + static_cast<std::size_t>(k) * dim;
                    for (int c = 0; c < dim; ++c) row[c] += in[c];
                }
            }
            for (int k = 0; k < cfg.codebook_size; ++k) {
                count.data[static_cast<std::size_t>(k)] =
                    decay * count.data[static_cast<std::size_t>(k)] + (T(1) - decay) * bcount[static_cast<std::size_t>(k)];
                T* srow = sum.data.data() + static_cast<std::size_t>(k) * dim;
                const T* brow = bsum.data() + static_cast<std::size_t>(k) * dim;
                for (int c = 0; c < dim; ++c) srow[c] = decay * srow[c] + (T(1) - decay) * brow[c];
                T denom = std::max(count.data[static_cast<std::size_t>(k)], T(1e-5));
                T* erow = cb.data.data() + static_cast<std::size_t>(k) * dim;
                for (int c = 0; c < dim; ++c) erow[c] = srow[c] / denom;

                if (bcount[static_cast<std::size_t>(k)] > T(0)) {
                    stale.data[static_cast<std::size_t>(k)] = T(0);
                } else {
                    stale.data[static_cast<std::size_t>(k)] += T(1);
                    if (pool_rows > 0 && stale.data[static_cast<std::size_t>(k)] >= T(cfg.dead_code_steps)) {
                        // Revive a dead code with a random latent from this batch.
                        std::size_t pick = revival_rng_.uniform_int(pool_rows);
                        const T* src = nullptr;
                        for (const auto* rv : batch) {
                            const auto& st = rv->stages[static_cast<std::size_t>(s)];
                            if (pick < st.codes.size()) {
                                src = st.inputs.data() + pick * dim;
                                break;
                            }
                            pick -= st.codes.size();
                        }
                        for (int c = 0; c < dim; ++c) {
                            erow[c] = src[c];
                            srow[c] = src[c];
                        }
                        count.data[static_cast<std::size_t>(k)] = T(1);
                        stale.data[static_cast<std::size_t>(k)] = T(0);
                    }
                }
            }
        }
    }

    // ---- training / inference ----

    T train_step(const std::vector<const MeshSample*>& batch, const AdamWConfig& opt, int threads = 1) {
        std::size_t b = batch.size();
        std::vector<std::unique_ptr<GraphT<T>>> graphs(b);
        std::vector<LossOut> outs(b);
        parallel_for(b, threads, [&](std::size_t i) {
            graphs[i] = std::make_unique<GraphT<T>>(true);
            outs[i] = loss(*graphs[i], *batch[i]);
            graphs[i]->backward(outs[i].loss);
        });
        store.zero_grads();
        T total = T(0);
        std::vector<const RvqValues<T>*> rvqs;
        rvqs.reserve(b);
        for (std::size_t i = 0; i < b; ++i) {
            graphs[i]->flush_grads(store, T(1) / static_cast<T>(b));
            total += graphs[i]->value(outs[i].loss)[0];
            rvqs.push_back(&outs[i].rvq);
        }
        ema_update(rvqs);
        store.adamw_step(opt);
        return total / static_cast<T>(b);
    }

    std::vector<int> tokenize(const MeshSample& sample) {
        std::vector<T> latents = encode_latents(sample);
        return rvq_values(latents, 3 * sample.seq.face_count()).tokens;
    }

    // Codebook lookups summed per vertex slot across the r stages.
    std::vector<T> codes_to_latents(const std::vector<int>& tokens) const {
        int r = cfg.residual_depth;
        if (tokens.empty() || tokens.size() % static_cast<std::size_t>(3 * r) != 0)
            throw Error("detokenize: token count must be a positive multiple of 3r");
        int rows = static_cast<int>(tokens.size()) / r;
        std::vector<T> latents(static_cast<std::size_t>(rows) * cfg.codebook_dim, T(0));
        for (int i = 0; i < rows; ++i) {
            for (int s = 0; s < r; ++s) {
                int code = tokens[static_cast<std::size_t>(i) * r + s];
                if (code < 0 || code >= cfg.codebook_size) throw Error("detokenize: token id out of range");
                const TensorT<T>& cb = store["codebook.s" + std::to_string(s)];
                const T* e = cb.data.data() + static_cast<std::size_t>(code) * cfg.codebook_dim;
                T* row = latents.data() + static_cast<std::size_t>(i) * cfg.codebook_dim;
                for (int c = 0; c < cfg.codebook_dim; ++c) row[c] += e[c];
            }
        }
        return latents;
    }

    FaceSequence decode_latents_greedy(const std::vector<T>& latents, int n_faces) {
        GraphT<T> g(false);
        Var q = g.constant({3 * n_faces, cfg.codebook_dim}, latents);
        Var logits = decode_hierarchical(g, q, n_faces);
        return argmax_sequence(g.value(logits), 9 * n_faces);
    }

    ReconstructionReport reconstruct(const MeshSample& sample) {
        GraphT<T> g(false);
        Var z = split_and_aggregate(g, encode(g, sample.seq, sample.mesh), sample.mesh);
        RvqValues<T> vals = rvq_values(g.value(z), 3 * sample.seq.face_count());
        Var q = g.constant(g.shape(z), vals.quantized);
        Var logits = decode_hierarchical(g, q, sample.seq.face_count());
        FaceSequence pred = argmax_sequence(g.value(logits), static_cast<int>(sample.seq.coords.size()));

        ReconstructionReport rep;
        int n = sample.seq.face_count();
        int exact_faces = 0;
        double l2 = 0.0;
        for (int f = 0; f < n; ++f) {
            bool all = true;
            for (int c = 0; c < 9; ++c)
                all = all && pred.coords[static_cast<std::size_t>(f) * 9 + c] == sample.seq.coords[static_cast<std::size_t>(f) * 9 + c];
            exact_faces += all ? 1 : 0;
        }
        for (int vpos = 0; vpos < 3 * n; ++vpos) {
            double d2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                int pb = pred.coords[static_cast<std::size_t>(vpos) * 3 + a];
                int tb = sample.seq.coords[static_cast<std::size_t>(vpos) * 3 + a];
                double diff = (pb - tb) / static_cast<double>(kGridSize);
                d2 += diff * diff;
            }
            l2 += std::sqrt(d2);
        }
        rep.triangle_accuracy = static_cast<double>(exact_faces) / n;
        rep.l2_e3 = l2 / (3.0 * n) * 1e3;
        try {
            auto rebuilt = from_sequence(pred);
            rep.mesh = rebuilt.mesh;
            rep.dropped_faces = rebuilt.dropped_faces;
        } catch (const Error&) {
            rep.dropped_faces = n;
        }
        return rep;
    }

    std::vector<T> encode_latents(const MeshSample& sample) {
        GraphT<T> g(false);
        Var z = split_and_aggregate(g, encode(g, sample.seq, sample.mesh), sample.mesh);
        return g.value(z);
    }

private:
    static FaceSequence argmax_sequence(const std::vector<T>& logits, int rows) {
        FaceSequence out;
        out.coords.reserve(static_cast<std::size_t>(rows));
        for (int i = 0; i < rows; ++i) {
            const T* row = logits.data() + static_cast<std::size_t>(i) * kGridSize;
            int best = 0;
            for (int j = 1; j < kGridSize; ++j)
                if (row[j] > row[best]) best = j;
            out.coords.push_back(best);
        }
        return out;
    }

    // Copies loaded tensors into a freshly constructed store, verifying names
    // and shapes; keeps the constructor as the single source of architecture.
    static void adopt(ParameterStoreT<T>& dst, ParameterStoreT<T>& src) {
        if (dst.count() != src.count()) throw Error("checkpoint: parameter count mismatch");
        for (int i = 0; i < dst.count(); ++i) {
            auto& d = dst.entry(i);
            const auto& s = src.entry(src.index_of(d.name));
            if (s.value.shape != d.value.shape) throw Error("checkpoint: shape mismatch for " + d.name);
            d.value.data = s.value.data;
            if (d.trainable) {
                d.m1.data = s.m1.data;
                d.m2.data = s.m2.data;
            }
        }
        dst.set_step(src.step());
    }

    int coord_dim_ = 16;
    LinearT<T> normal_embed_, area_embed_, input_proj_, enc_out_, fuse_, expand1_, expand2_, head_;
    LayerNormT<T> enc_ln_, face_ln_, vert_ln_;
    std::vector<TransformerBlockT<T>> enc_blocks_, face_blocks_, vert_blocks_;
    Rng revival_rng_;
};

using MeshAutoEncoder = MeshAutoEncoderT<float>;

}  // namespace pivotgen
