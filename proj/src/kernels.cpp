#include "lightnas/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lightnas {

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Linear: return "linear";
        case LayerKind::LayerNorm: return "layernorm";
        case LayerKind::Embedding: return "embedding";
        case LayerKind::Conv1d: return "conv1d";
        case LayerKind::SepConv1d: return "sepconv1d";
        case LayerKind::Mhsa: return "mhsa";
        case LayerKind::Ffn: return "ffn";
        case LayerKind::LengthReg: return "length_reg";
    }
    return "?";
}

Tensor& OpInstance::weight(std::string_view name) {
    for (auto& [n, t] : weights) {
        if (n == name) return t;
    }
    throw std::invalid_argument("op " + layer_kind_name(kind) + ": no weight named '" +
                                std::string(name) + "'");
}

const Tensor& OpInstance::weight(std::string_view name) const {
    return const_cast<OpInstance*>(this)->weight(name);
}

std::size_t OpInstance::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : weights) n += t.numel();
    return n;
}

OpGrads zero_grads(const OpInstance& op) {
    OpGrads grads;
    grads.reserve(op.weights.size());
    for (const auto& [name, t] : op.weights) grads.emplace_back(t.shape);
    return grads;
}

// ---------------------------------------------------------------------------
// constructors
// ---------------------------------------------------------------------------

OpInstance make_linear(std::size_t in, std::size_t out, bool bias) {
    OpInstance op;
    op.kind = LayerKind::Linear;
    op.dims.in = in;
    op.dims.out = out;
    op.dims.bias = bias;
    op.weights.emplace_back("w", Tensor{in, out});
    if (bias) op.weights.emplace_back("b", Tensor{out});
    return op;
}

OpInstance make_layernorm(std::size_t dim, double epsilon) {
    OpInstance op;
    op.kind = LayerKind::LayerNorm;
    op.dims.in = dim;
    op.dims.out = dim;
    op.dims.epsilon = epsilon;
    op.weights.emplace_back("gain", Tensor{dim});
    op.weights.emplace_back("bias", Tensor{dim});
    return op;
}

OpInstance make_embedding(std::size_t vocab, std::size_t dim) {
    OpInstance op;
    op.kind = LayerKind::Embedding;
    op.dims.vocab = vocab;
    op.dims.in = 1;
    op.dims.out = dim;
    op.weights.emplace_back("table", Tensor{vocab, dim});
    return op;
}

OpInstance make_conv1d(std::size_t in, std::size_t out, std::size_t kernel, bool bias) {
    if (kernel % 2 == 0) throw std::invalid_argument("conv1d: kernel must be odd");
    OpInstance op;
    op.kind = LayerKind::Conv1d;
    op.dims.in = in;
    op.dims.out = out;
    op.dims.kernel = kernel;
    op.dims.bias = bias;
    op.weights.emplace_back("w", Tensor{kernel, in, out});
    if (bias) op.weights.emplace_back("b", Tensor{out});
    return op;
}

OpInstance make_sepconv1d(std::size_t in, std::size_t out, std::size_t kernel, bool bias) {
    if (kernel % 2 == 0) throw std::invalid_argument("sepconv1d: kernel must be odd");
    OpInstance op;
    op.kind = LayerKind::SepConv1d;
    op.dims.in = in;
    op.dims.out = out;
    op.dims.kernel = kernel;
    op.dims.bias = bias;
    op.weights.emplace_back("depthwise", Tensor{kernel, in});
    op.weights.emplace_back("pointwise", Tensor{in, out});
    if (bias) op.weights.emplace_back("b", Tensor{out});  // pointwise stage only
    return op;
}

OpInstance make_mhsa(std::size_t dim, std::size_t heads, bool bias) {
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("mhsa: heads " + std::to_string(heads) +
                                    " must divide hidden size " + std::to_string(dim));
    }
    OpInstance op;
    op.kind = LayerKind::Mhsa;
    op.dims.in = dim;
    op.dims.out = dim;
    op.dims.heads = heads;
    op.dims.bias = bias;
    for (const char* n : {"wq", "wk", "wv", "wo"}) op.weights.emplace_back(n, Tensor{dim, dim});
    if (bias) {
        for (const char* n : {"bq", "bk", "bv", "bo"}) op.weights.emplace_back(n, Tensor{dim});
    }
    return op;
}

OpInstance make_ffn(std::size_t dim, std::size_t filter, std::size_t kernel, bool bias) {
    if (kernel % 2 == 0) throw std::invalid_argument("ffn: conv kernel must be odd");
    OpInstance op;
    op.kind = LayerKind::Ffn;
    op.dims.in = dim;
    op.dims.out = dim;
    op.dims.filter = filter;
    op.dims.kernel = kernel;
    op.dims.bias = bias;
    op.weights.emplace_back("conv_w", Tensor{kernel, dim, filter});
    if (bias) op.weights.emplace_back("conv_b", Tensor{filter});
    op.weights.emplace_back("lin_w", Tensor{filter, dim});
    if (bias) op.weights.emplace_back("lin_b", Tensor{dim});
    return op;
}

OpInstance make_length_reg(std::vector<std::size_t> durations) {
    OpInstance op;
    op.kind = LayerKind::LengthReg;
    op.dims.durations = std::move(durations);
    return op;
}

OpInstance make_searched_op(const OpCode& code, std::size_t d, std::size_t ffn_filter,
                            std::size_t ffn_kernel, bool bias) {
    switch (code.kind) {
        case OpKind::MHSA: return make_mhsa(d, static_cast<std::size_t>(code.param), bias);
        case OpKind::SEPCONV:
            return make_sepconv1d(d, d, static_cast<std::size_t>(code.param), bias);
        case OpKind::FFN: return make_ffn(d, ffn_filter, ffn_kernel, bias);
    }
    throw std::invalid_argument("make_searched_op: bad op kind");
}

void init_weights(OpInstance& op, const Rng& base, std::string_view name) {
    if (op.kind == LayerKind::LayerNorm) {
        op.weight("gain").fill(1.0);
        op.weight("bias").fill(0.0);
        return;
    }
    auto fan_in = [&](const std::string& wname) -> std::size_t {
        switch (op.kind) {
            case LayerKind::Linear: return op.dims.in;
            case LayerKind::Embedding: return op.dims.out;
            case LayerKind::Conv1d: return op.dims.kernel * op.dims.in;
            case LayerKind::SepConv1d:
                if (wname == "depthwise") return op.dims.kernel;
                return op.dims.in;
            case LayerKind::Mhsa: return op.dims.in;
            case LayerKind::Ffn:
                if (wname == "conv_w" || wname == "conv_b") return op.dims.kernel * op.dims.in;
                return op.dims.filter;
            default: return 1;
        }
    };
    for (auto& [wname, t] : op.weights) {
        Rng stream = base.fork(std::string(name) + "/" + wname);
        const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(
                                                 1, fan_in(wname))));
        for (double& v : t.data) v = stream.uniform(-bound, bound);
    }
}

// ---------------------------------------------------------------------------
// forward helpers
// ---------------------------------------------------------------------------

namespace {

// Zero-pad rows by (K-1)/2 on each side.
Tensor pad_rows(const Tensor& x, std::size_t kernel) {
    const std::size_t pad = (kernel - 1) / 2;
    Tensor out{x.rows() + 2 * pad, x.cols()};
    std::copy(x.data.begin(), x.data.end(), out.data.begin() + pad * x.cols());
    return out;
}

Tensor linear_fwd(const Tensor& x, const Tensor& w, const Tensor* b, MacCounter* macs) {
    const std::size_t L = x.rows(), I = w.shape[0], O = w.shape[1];
    if (x.cols() != I) {
        throw std::invalid_argument("linear: input cols " + std::to_string(x.cols()) +
                                    " != weight rows " + std::to_string(I));
    }
    Tensor y{L, O};
    for (std::size_t t = 0; t < L; ++t) {
        double* yt = &y.data[t * O];
        if (b) std::copy(b->data.begin(), b->data.end(), yt);
        const double* xt = &x.data[t * I];
        for (std::size_t i = 0; i < I; ++i) {
            const double xi = xt[i];
            const double* wi = &w.data[i * O];
            for (std::size_t o = 0; o < O; ++o) yt[o] += xi * wi[o];
        }
    }
    if (macs) macs->macs += static_cast<std::uint64_t>(L) * I * O;
    return y;
}

void linear_bwd(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw,
                Tensor* gb) {
    const std::size_t L = x.rows(), I = w.shape[0], O = w.shape[1];
    for (std::size_t t = 0; t < L; ++t) {
        const double* gyt = &gy.data[t * O];
        const double* xt = &x.data[t * I];
        double* gxt = &gx.data[t * I];
        for (std::size_t i = 0; i < I; ++i) {
            const double* wi = &w.data[i * O];
            double* gwi = &gw.data[i * O];
            double acc = 0.0;
            for (std::size_t o = 0; o < O; ++o) {
                acc += gyt[o] * wi[o];
                gwi[o] += xt[i] * gyt[o];
            }
            gxt[i] += acc;
        }
        if (gb) {
            for (std::size_t o = 0; o < O; ++o) gb->data[o] += gyt[o];
        }
    }
}

Tensor layernorm_fwd(const OpInstance& op, const Tensor& x, MacCounter*) {
    const std::size_t L = x.rows(), D = x.cols();
    const Tensor& gain = op.weight("gain");
    const Tensor& bias = op.weight("bias");
    if (D != op.dims.in) throw std::invalid_argument("layernorm: dim mismatch");
    Tensor y{L, D};
    for (std::size_t t = 0; t < L; ++t) {
        const double* xt = &x.data[t * D];
        double mean = 0.0;
        for (std::size_t i = 0; i < D; ++i) mean += xt[i];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t i = 0; i < D; ++i) var += (xt[i] - mean) * (xt[i] - mean);
        var /= static_cast<double>(D);
        const double inv = 1.0 / std::sqrt(var + op.dims.epsilon);
        double* yt = &y.data[t * D];
        for (std::size_t i = 0; i < D; ++i) {
            yt[i] = (xt[i] - mean) * inv * gain.data[i] + bias.data[i];
        }
    }
    return y;
}

void layernorm_bwd(const OpInstance& op, const Tensor& x, const Tensor& gy, Tensor& gx,
                   OpGrads& grads) {
    const std::size_t L = x.rows(), D = x.cols();
    const Tensor& gain = op.weight("gain");
    Tensor& ggain = grads[0];
    Tensor& gbias = grads[1];
    for (std::size_t t = 0; t < L; ++t) {
        const double* xt = &x.data[t * D];
        const double* gyt = &gy.data[t * D];
        double mean = 0.0;
        for (std::size_t i = 0; i < D; ++i) mean += xt[i];
        mean /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t i = 0; i < D; ++i) var += (xt[i] - mean) * (xt[i] - mean);
        var /= static_cast<double>(D);
        const double inv = 1.0 / std::sqrt(var + op.dims.epsilon);

        // xhat = (x - mean) * inv; dxhat = gy .* gain
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            const double xhat = (xt[i] - mean) * inv;
            const double dxhat = gyt[i] * gain.data[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            ggain.data[i] += gyt[i] * xhat;
            gbias.data[i] += gyt[i];
        }
        mean_dxhat /= static_cast<double>(D);
        mean_dxhat_xhat /= static_cast<double>(D);
        double* gxt = &gx.data[t * D];
        for (std::size_t i = 0; i < D; ++i) {
            const double xhat = (xt[i] - mean) * inv;
            const double dxhat = gyt[i] * gain.data[i];
            gxt[i] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

std::vector<int> tokens_from_tensor(const Tensor& x, std::size_t vocab) {
    std::vector<int> tokens(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x.data[i];
        if (v != std::floor(v) || v < 0 || v >= static_cast<double>(vocab)) {
            throw std::invalid_argument("embedding: token " + std::to_string(v) +
                                        " out of range [0, " + std::to_string(vocab) + ")");
        }
        tokens[i] = static_cast<int>(v);
    }
    return tokens;
}

Tensor conv1d_fwd(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    const std::size_t L = x.rows(), I = op.dims.in, O = op.dims.out, K = op.dims.kernel;
    if (x.cols() != I) throw std::invalid_argument("conv1d: input dim mismatch");
    const Tensor& w = op.weight("w");
    const Tensor* b = op.dims.bias ? &op.weight("b") : nullptr;
    const Tensor xp = pad_rows(x, K);
    Tensor y{L, O};
    for (std::size_t t = 0; t < L; ++t) {
        double* yt = &y.data[t * O];
        if (b) std::copy(b->data.begin(), b->data.end(), yt);
        for (std::size_t k = 0; k < K; ++k) {
            const double* xr = &xp.data[(t + k) * I];
            const double* wk = &w.data[k * I * O];
            for (std::size_t i = 0; i < I; ++i) {
                const double xi = xr[i];
                const double* wki = &wk[i * O];
                for (std::size_t o = 0; o < O; ++o) yt[o] += xi * wki[o];
            }
        }
    }
    if (macs) macs->macs += static_cast<std::uint64_t>(L) * K * I * O;
    return y;
}

void conv1d_bwd(const OpInstance& op, const Tensor& x, const Tensor& gy, Tensor& gx,
                OpGrads& grads) {
    const std::size_t L = x.rows(), I = op.dims.in, O = op.dims.out, K = op.dims.kernel;
    const std::size_t pad = (K - 1) / 2;
    const Tensor& w = op.weight("w");
    const Tensor xp = pad_rows(x, K);
    Tensor gxp{xp.shape};
    Tensor& gw = grads[0];
    Tensor* gb = op.dims.bias ? &grads[1] : nullptr;
    for (std::size_t t = 0; t < L; ++t) {
        const double* gyt = &gy.data[t * O];
        for (std::size_t k = 0; k < K; ++k) {
            const double* xr = &xp.data[(t + k) * I];
            double* gxr = &gxp.data[(t + k) * I];
            const double* wk = &w.data[k * I * O];
            double* gwk = &gw.data[k * I * O];
            for (std::size_t i = 0; i < I; ++i) {
                double acc = 0.0;
                for (std::size_t o = 0; o < O; ++o) {
                    acc += gyt[o] * wk[i * O + o];
                    gwk[i * O + o] += xr[i] * gyt[o];
                }
                gxr[i] += acc;
            }
        }
        if (gb) {
            for (std::size_t o = 0; o < O; ++o) gb->data[o] += gyt[o];
        }
    }
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t i = 0; i < I; ++i) gx.at(t, i) += gxp.at(t + pad, i);
    }
}

Tensor sepconv_depthwise(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    const std::size_t L = x.rows(), I = op.dims.in, K = op.dims.kernel;
    const Tensor& wd = op.weight("depthwise");
    const Tensor xp = pad_rows(x, K);
    Tensor m{L, I};
    for (std::size_t t = 0; t < L; ++t) {
        double* mt = &m.data[t * I];
        for (std::size_t k = 0; k < K; ++k) {
            const double* xr = &xp.data[(t + k) * I];
            const double* wk = &wd.data[k * I];
            for (std::size_t i = 0; i < I; ++i) mt[i] += wk[i] * xr[i];
        }
    }
    if (macs) macs->macs += static_cast<std::uint64_t>(L) * K * I;
    return m;
}

Tensor sepconv_fwd(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    if (x.cols() != op.dims.in) throw std::invalid_argument("sepconv1d: input dim mismatch");
    const Tensor m = sepconv_depthwise(op, x, macs);
    return linear_fwd(m, op.weight("pointwise"), op.dims.bias ? &op.weight("b") : nullptr, macs);
}

void sepconv_bwd(const OpInstance& op, const Tensor& x, const Tensor& gy, Tensor& gx,
                 OpGrads& grads) {
    const std::size_t L = x.rows(), I = op.dims.in, K = op.dims.kernel;
    const std::size_t pad = (K - 1) / 2;
    const Tensor& wd = op.weight("depthwise");
    const Tensor& wp = op.weight("pointwise");
    Tensor& gwd = grads[0];
    Tensor& gwp = grads[1];
    Tensor* gb = op.dims.bias ? &grads[2] : nullptr;

    const Tensor m = sepconv_depthwise(op, x, nullptr);
    Tensor gm{L, I};
    linear_bwd(m, wp, gy, gm, gwp, gb);

    const Tensor xp = pad_rows(x, K);
    Tensor gxp{xp.shape};
    for (std::size_t t = 0; t < L; ++t) {
        const double* gmt = &gm.data[t * I];
        for (std::size_t k = 0; k < K; ++k) {
            const double* xr = &xp.data[(t + k) * I];
            double* gxr = &gxp.data[(t + k) * I];
            const double* wk = &wd.data[k * I];
            double* gwk = &gwd.data[k * I];
            for (std::size_t i = 0; i < I; ++i) {
                gwk[i] += xr[i] * gmt[i];
                gxr[i] += wk[i] * gmt[i];
            }
        }
    }
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t i = 0; i < I; ++i) gx.at(t, i) += gxp.at(t + pad, i);
    }
}

struct MhsaCache {
    Tensor q, k, v;      // [L x d]
    Tensor attn;         // [h x L x L]
    Tensor concat;       // [L x d]
};

MhsaCache mhsa_fwd_cache(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    const std::size_t L = x.rows(), D = op.dims.in, H = op.dims.heads;
    if (x.cols() != D) throw std::invalid_argument("mhsa: input dim mismatch");
    const std::size_t dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    MhsaCache c;
    c.q = linear_fwd(x, op.weight("wq"), op.dims.bias ? &op.weight("bq") : nullptr, macs);
    c.k = linear_fwd(x, op.weight("wk"), op.dims.bias ? &op.weight("bk") : nullptr, macs);
    c.v = linear_fwd(x, op.weight("wv"), op.dims.bias ? &op.weight("bv") : nullptr, macs);
    c.attn = Tensor{H, L, L};
    c.concat = Tensor{L, D};
    std::vector<double> row(L);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        double* attn_h = &c.attn.data[h * L * L];
        for (std::size_t i = 0; i < L; ++i) {
            double max_s = -1e300;
            for (std::size_t j = 0; j < L; ++j) {
                double s = 0.0;
                const double* qi = &c.q.data[i * D + off];
                const double* kj = &c.k.data[j * D + off];
                for (std::size_t a = 0; a < dh; ++a) s += qi[a] * kj[a];
                row[j] = s * scale;
                max_s = std::max(max_s, row[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < L; ++j) {
                row[j] = std::exp(row[j] - max_s);
                denom += row[j];
            }
            double* arow = &attn_h[i * L];
            for (std::size_t j = 0; j < L; ++j) arow[j] = row[j] / denom;
            double* out = &c.concat.data[i * D + off];
            for (std::size_t j = 0; j < L; ++j) {
                const double a = arow[j];
                const double* vj = &c.v.data[j * D + off];
                for (std::size_t b = 0; b < dh; ++b) out[b] += a * vj[b];
            }
        }
    }
    // per head: L*L*dh for QK^T and for attn*V => 2*L^2*d total
    if (macs) macs->macs += 2ull * L * L * D;
    return c;
}

Tensor mhsa_fwd(const OpInstance& op, const Tensor& x, Tensor* attention, MacCounter* macs) {
    MhsaCache c = mhsa_fwd_cache(op, x, macs);
    if (attention) *attention = c.attn;
    return linear_fwd(c.concat, op.weight("wo"), op.dims.bias ? &op.weight("bo") : nullptr, macs);
}

void mhsa_bwd(const OpInstance& op, const Tensor& x, const Tensor& gy, Tensor& gx,
              OpGrads& grads) {
    const std::size_t L = x.rows(), D = op.dims.in, H = op.dims.heads;
    const std::size_t dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    MhsaCache c = mhsa_fwd_cache(op, x, nullptr);

    auto gidx = [&](std::string_view name) -> Tensor& {
        for (std::size_t i = 0; i < op.weights.size(); ++i) {
            if (op.weights[i].first == name) return grads[i];
        }
        throw std::logic_error("mhsa_bwd: missing grad slot");
    };

    // output projection
    Tensor gconcat{L, D};
    linear_bwd(c.concat, op.weight("wo"), gy, gconcat, gidx("wo"),
               op.dims.bias ? &gidx("bo") : nullptr);

    Tensor gq{L, D}, gk{L, D}, gv{L, D};
    std::vector<double> g_attn(L), g_s(L);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        const double* attn_h = &c.attn.data[h * L * L];
        for (std::size_t i = 0; i < L; ++i) {
            const double* arow = &attn_h[i * L];
            const double* gout = &gconcat.data[i * D + off];
            // dA = gout . V^T ; dV += A^T . gout
            for (std::size_t j = 0; j < L; ++j) {
                const double* vj = &c.v.data[j * D + off];
                double* gvj = &gv.data[j * D + off];
                double acc = 0.0;
                for (std::size_t b = 0; b < dh; ++b) {
                    acc += gout[b] * vj[b];
                    gvj[b] += arow[j] * gout[b];
                }
                g_attn[j] = acc;
            }
            // softmax backward: dS = A .* (dA - sum(dA .* A))
            double dot = 0.0;
            for (std::size_t j = 0; j < L; ++j) dot += g_attn[j] * arow[j];
            for (std::size_t j = 0; j < L; ++j) g_s[j] = arow[j] * (g_attn[j] - dot) * scale;
            // dQ_i += dS . K ; dK_j += dS^T . Q
            double* gqi = &gq.data[i * D + off];
            const double* qi = &c.q.data[i * D + off];
            for (std::size_t j = 0; j < L; ++j) {
                const double* kj = &c.k.data[j * D + off];
                double* gkj = &gk.data[j * D + off];
                for (std::size_t a = 0; a < dh; ++a) {
                    gqi[a] += g_s[j] * kj[a];
                    gkj[a] += g_s[j] * qi[a];
                }
            }
        }
    }
    linear_bwd(x, op.weight("wq"), gq, gx, gidx("wq"), op.dims.bias ? &gidx("bq") : nullptr);
    linear_bwd(x, op.weight("wk"), gk, gx, gidx("wk"), op.dims.bias ? &gidx("bk") : nullptr);
    linear_bwd(x, op.weight("wv"), gv, gx, gidx("wv"), op.dims.bias ? &gidx("bv") : nullptr);
}

Tensor ffn_fwd(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    if (x.cols() != op.dims.in) throw std::invalid_argument("ffn: input dim mismatch");
    OpInstance conv;
    conv.kind = LayerKind::Conv1d;
    conv.dims.in = op.dims.in;
    conv.dims.out = op.dims.filter;
    conv.dims.kernel = op.dims.kernel;
    conv.dims.bias = op.dims.bias;
    conv.weights.emplace_back("w", op.weight("conv_w"));
    if (op.dims.bias) conv.weights.emplace_back("b", op.weight("conv_b"));
    Tensor h = conv1d_fwd(conv, x, macs);
    for (double& v : h.data) v = std::max(0.0, v);
    return linear_fwd(h, op.weight("lin_w"), op.dims.bias ? &op.weight("lin_b") : nullptr, macs);
}

void ffn_bwd(const OpInstance& op, const Tensor& x, const Tensor& gy, Tensor& gx, OpGrads& grads) {
    OpInstance conv;
    conv.kind = LayerKind::Conv1d;
    conv.dims.in = op.dims.in;
    conv.dims.out = op.dims.filter;
    conv.dims.kernel = op.dims.kernel;
    conv.dims.bias = op.dims.bias;
    conv.weights.emplace_back("w", op.weight("conv_w"));
    if (op.dims.bias) conv.weights.emplace_back("b", op.weight("conv_b"));

    const Tensor pre = conv1d_fwd(conv, x, nullptr);
    Tensor h = pre;
    for (double& v : h.data) v = std::max(0.0, v);

    auto gidx = [&](std::string_view name) -> Tensor& {
        for (std::size_t i = 0; i < op.weights.size(); ++i) {
            if (op.weights[i].first == name) return grads[i];
        }
        throw std::logic_error("ffn_bwd: missing grad slot");
    };

    Tensor gh{h.shape};
    linear_bwd(h, op.weight("lin_w"), gy, gh, gidx("lin_w"),
               op.dims.bias ? &gidx("lin_b") : nullptr);
    for (std::size_t i = 0; i < gh.numel(); ++i) {
        if (pre.data[i] <= 0.0) gh.data[i] = 0.0;
    }
    OpGrads conv_grads;
    conv_grads.push_back(Tensor{conv.weight("w").shape});
    if (op.dims.bias) conv_grads.push_back(Tensor{conv.weight("b").shape});
    conv1d_bwd(conv, x, gh, gx, conv_grads);
    for (std::size_t i = 0; i < conv_grads[0].numel(); ++i) {
        gidx("conv_w").data[i] += conv_grads[0].data[i];
    }
    if (op.dims.bias) {
        for (std::size_t i = 0; i < conv_grads[1].numel(); ++i) {
            gidx("conv_b").data[i] += conv_grads[1].data[i];
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

Tensor length_regulate(const Tensor& h, const std::vector<std::size_t>& durations) {
    if (durations.size() != h.rows()) {
        throw std::invalid_argument("length_regulate: " + std::to_string(durations.size()) +
                                    " durations for " + std::to_string(h.rows()) + " rows");
    }
    std::size_t total = 0;
    for (std::size_t d : durations) total += d;
    if (total == 0) throw std::invalid_argument("length_regulate: all durations are zero");
    Tensor out{total, h.cols()};
    std::size_t row = 0;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        for (std::size_t r = 0; r < durations[i]; ++r, ++row) {
            std::copy(&h.data[i * h.cols()], &h.data[(i + 1) * h.cols()], &out.data[row * h.cols()]);
        }
    }
    return out;
}

Tensor embedding_forward(const OpInstance& op, const std::vector<int>& tokens, MacCounter*) {
    const Tensor& table = op.weight("table");
    const std::size_t D = op.dims.out;
    Tensor out{tokens.size(), D};
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const int tok = tokens[t];
        if (tok < 0 || static_cast<std::size_t>(tok) >= op.dims.vocab) {
            throw std::invalid_argument("embedding: token " + std::to_string(tok) +
                                        " out of range");
        }
        std::copy(&table.data[tok * D], &table.data[(tok + 1) * D], &out.data[t * D]);
    }
    return out;
}

void embedding_backward(const OpInstance& op, const std::vector<int>& tokens,
                        const Tensor& grad_out, OpGrads& grads) {
    const std::size_t D = op.dims.out;
    Tensor& gt = grads[0];
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::size_t tok = static_cast<std::size_t>(tokens[t]);
        for (std::size_t i = 0; i < D; ++i) gt.data[tok * D + i] += grad_out.data[t * D + i];
    }
}

Tensor forward(const OpInstance& op, const Tensor& x, MacCounter* macs) {
    switch (op.kind) {
        case LayerKind::Linear:
            return linear_fwd(x, op.weight("w"), op.dims.bias ? &op.weight("b") : nullptr, macs);
        case LayerKind::LayerNorm: return layernorm_fwd(op, x, macs);
        case LayerKind::Embedding:
            return embedding_forward(op, tokens_from_tensor(x, op.dims.vocab), macs);
        case LayerKind::Conv1d: return conv1d_fwd(op, x, macs);
        case LayerKind::SepConv1d: return sepconv_fwd(op, x, macs);
        case LayerKind::Mhsa: return mhsa_fwd(op, x, nullptr, macs);
        case LayerKind::Ffn: return ffn_fwd(op, x, macs);
        case LayerKind::LengthReg: return length_regulate(x, op.dims.durations);
    }
    throw std::logic_error("forward: bad kind");
}

Tensor mhsa_forward_attn(const OpInstance& op, const Tensor& x, Tensor* attention,
                         MacCounter* macs) {
    return mhsa_fwd(op, x, attention, macs);
}

Tensor backward(const OpInstance& op, const Tensor& x, const Tensor& grad_out, OpGrads& grads) {
    Tensor gx{x.shape};
    switch (op.kind) {
        case LayerKind::Linear:
            linear_bwd(x, op.weight("w"), grad_out, gx, grads[0],
                       op.dims.bias ? &grads[1] : nullptr);
            break;
        case LayerKind::LayerNorm: layernorm_bwd(op, x, grad_out, gx, grads); break;
        case LayerKind::Embedding:
            embedding_backward(op, tokens_from_tensor(x, op.dims.vocab), grad_out, grads);
            break;  // token input has no gradient
        case LayerKind::Conv1d: conv1d_bwd(op, x, grad_out, gx, grads); break;
        case LayerKind::SepConv1d: sepconv_bwd(op, x, grad_out, gx, grads); break;
        case LayerKind::Mhsa: mhsa_bwd(op, x, grad_out, gx, grads); break;
        case LayerKind::Ffn: ffn_bwd(op, x, grad_out, gx, grads); break;
        case LayerKind::LengthReg: {
            const std::size_t D = x.cols();
            std::size_t row = 0;
            for (std::size_t i = 0; i < x.rows(); ++i) {
                for (std::size_t r = 0; r < op.dims.durations[i]; ++r, ++row) {
                    for (std::size_t c = 0; c < D; ++c) gx.at(i, c) += grad_out.at(row, c);
                }
            }
            break;
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// searched block
// ---------------------------------------------------------------------------

std::size_t SearchedBlock::param_count() const {
    return (norm ? norm->param_count() : 0) + op.param_count();
}

SearchedBlock make_searched_block(const OpCode& code, std::size_t d, std::size_t ffn_filter,
                                  std::size_t ffn_kernel, bool bias, bool layernorm) {
    SearchedBlock block;
    if (layernorm) block.norm = make_layernorm(d);
    block.op = make_searched_op(code, d, ffn_filter, ffn_kernel, bias);
    return block;
}

void init_block(SearchedBlock& block, const Rng& base, std::string_view name) {
    if (block.norm) init_weights(*block.norm, base, std::string(name) + "/norm");
    init_weights(block.op, base, std::string(name) + "/op");
}

Tensor block_forward(const SearchedBlock& block, const Tensor& x, MacCounter* macs) {
    Tensor inner = block.norm ? forward(*block.norm, x, macs) : x;
    Tensor y = forward(block.op, inner, macs);
    if (!y.same_shape(x)) {
        throw std::invalid_argument("block: op output " + y.shape_str() +
                                    " does not match residual input " + x.shape_str());
    }
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += x.data[i];
    return y;
}

BlockGrads zero_block_grads(const SearchedBlock& block) {
    BlockGrads g;
    if (block.norm) g.norm = zero_grads(*block.norm);
    g.op = zero_grads(block.op);
    return g;
}

Tensor block_backward(const SearchedBlock& block, const Tensor& x, const Tensor& grad_out,
                      BlockGrads& grads) {
    Tensor inner = block.norm ? forward(*block.norm, x, nullptr) : x;
    Tensor g_inner = backward(block.op, inner, grad_out, grads.op);
    Tensor gx = block.norm ? backward(*block.norm, x, g_inner, grads.norm) : g_inner;
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += grad_out.data[i];  // residual path
    return gx;
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

double grad_check(const OpInstance& op, const Tensor& x, double eps, std::uint64_t seed) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw std::invalid_argument("grad_check: eps must be in [1e-7, 1e-3]");
    }
    OpInstance probe = op;  // mutated copy for finite differences

    Tensor y0 = forward(probe, x, nullptr);
    Tensor c{y0.shape};
    Rng rng = Rng(seed).fork("grad_check");
    for (double& v : c.data) v = rng.uniform(-1.0, 1.0);

    OpGrads analytic = zero_grads(probe);
    Tensor gx = backward(probe, x, c, analytic);

    auto loss = [&](const Tensor& input) {
        Tensor y = forward(probe, input, nullptr);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += c.data[i] * y.data[i];
        return s;
    };

    double max_rel = 0.0;
    auto update = [&](double a, double n) {
        if (!std::isfinite(a) || !std::isfinite(n)) {
            throw std::runtime_error("grad_check: non-finite gradient");
        }
        const double rel = std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n));
        max_rel = std::max(max_rel, rel);
    };

    // weights
    Tensor xin = x;
    for (std::size_t wi = 0; wi < probe.weights.size(); ++wi) {
        Tensor& w = probe.weights[wi].second;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double saved = w.data[i];
            w.data[i] = saved + eps;
            const double lp = loss(xin);
            w.data[i] = saved - eps;
            const double lm = loss(xin);
            w.data[i] = saved;
            update(analytic[wi].data[i], (lp - lm) / (2.0 * eps));
        }
    }

    // input (not differentiable for token inputs)
    if (probe.kind != LayerKind::Embedding) {
        for (std::size_t i = 0; i < xin.numel(); ++i) {
            const double saved = xin.data[i];
            xin.data[i] = saved + eps;
            const double lp = loss(xin);
            xin.data[i] = saved - eps;
            const double lm = loss(xin);
            xin.data[i] = saved;
            update(gx.data[i], (lp - lm) / (2.0 * eps));
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// binary container
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kMagic = 0x544e574cu;  // "LWNT"
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("weight container: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("weight container: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& in) {
    std::uint64_t bits = get_u64(in);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const std::uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("weight container: truncated string");
    return s;
}

}  // namespace

void save_op(const OpInstance& op, std::ostream& out) {
    put_u32(out, kMagic);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(op.kind));
    put_u64(out, op.dims.in);
    put_u64(out, op.dims.out);
    put_u64(out, op.dims.filter);
    put_u64(out, op.dims.kernel);
    put_u64(out, op.dims.heads);
    put_u64(out, op.dims.vocab);
    put_f64(out, op.dims.epsilon);
    put_u32(out, op.dims.bias ? 1 : 0);
    put_u64(out, op.dims.durations.size());
    for (std::size_t d : op.dims.durations) put_u64(out, d);
    put_u32(out, static_cast<std::uint32_t>(op.weights.size()));
    for (const auto& [name, t] : op.weights) {
        put_string(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) put_u64(out, d);
        for (double v : t.data) put_f64(out, v);
    }
}

OpInstance load_op(std::istream& in) {
    if (get_u32(in) != kMagic) throw std::runtime_error("weight container: bad magic");
    if (get_u32(in) != kVersion) throw std::runtime_error("weight container: bad version");
    OpInstance op;
    op.kind = static_cast<LayerKind>(get_u32(in));
    op.dims.in = get_u64(in);
    op.dims.out = get_u64(in);
    op.dims.filter = get_u64(in);
    op.dims.kernel = get_u64(in);
    op.dims.heads = get_u64(in);
    op.dims.vocab = get_u64(in);
    op.dims.epsilon = get_f64(in);
    op.dims.bias = get_u32(in) != 0;
    op.dims.durations.resize(get_u64(in));
    for (std::size_t& d : op.dims.durations) d = get_u64(in);
    const std::uint32_t n_tensors = get_u32(in);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_string(in);
        std::vector<std::size_t> shape(get_u32(in));
        for (std::size_t& d : shape) d = get_u64(in);
        Tensor t{shape};
        for (double& v : t.data) v = get_f64(in);
        op.weights.emplace_back(std::move(name), std::move(t));
    }
    return op;
}

void save_op_file(const OpInstance& op, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    save_op(op, out);
}

OpInstance load_op_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    return load_op(in);
}

}  // namespace lightnas
