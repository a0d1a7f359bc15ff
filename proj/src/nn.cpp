#include "terom/nn.hpp"

#include <cmath>

namespace terom::nn {

namespace {

using Eigen::Map;

Matrix silu_mat(const Matrix& x) {
    return x.unaryExpr([](double v) { return silu(v); });
}

Matrix silu_deriv_mat(const Matrix& x) {
    return x.unaryExpr([](double v) { return silu_deriv(v); });
}

Index conv_out_extent(Index in) { return (in - 1) / 2 + 1; }

struct CnnDims {
    std::array<Index, 4> in_c, out_c, in_h, in_w, out_h, out_w;
    Index last_channels = 0;
};

CnnDims cnn_dims(const CnnSpec& spec) {
    CnnDims d;
    Index c = spec.in_channels, h = spec.height, w = spec.width;
    for (int l = 0; l < 4; ++l) {
        d.in_c[l] = c;
        d.in_h[l] = h;
        d.in_w[l] = w;
        d.out_c[l] = spec.channels[static_cast<std::size_t>(l)];
        h = conv_out_extent(h);
        w = conv_out_extent(w);
        d.out_h[l] = h;
        d.out_w[l] = w;
        c = d.out_c[l];
    }
    d.last_channels = c;
    return d;
}

inline Index clamp_idx(Index v, Index hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); }

/// Strided conv with replicate padding 1. W layout: [o][i][ky][kx].
void conv_forward(const double* w, const double* b, const double* in, double* out, Index c_in,
                  Index h, Index wd, Index c_out, Index oh, Index ow) {
    for (Index o = 0; o < c_out; ++o) {
        const double* wo = w + o * c_in * 9;
        double* outo = out + o * oh * ow;
        for (Index y = 0; y < oh; ++y) {
            for (Index x = 0; x < ow; ++x) {
                double acc = b[o];
                for (Index i = 0; i < c_in; ++i) {
                    const double* ini = in + i * h * wd;
                    const double* wi = wo + i * 9;
                    for (Index ky = 0; ky < 3; ++ky) {
                        const Index yy = clamp_idx(2 * y - 1 + ky, h);
                        const double* row = ini + yy * wd;
                        for (Index kx = 0; kx < 3; ++kx) {
                            const Index xx = clamp_idx(2 * x - 1 + kx, wd);
                            acc += wi[ky * 3 + kx] * row[xx];
                        }
                    }
                }
                outo[y * ow + x] = acc;
            }
        }
    }
}

void conv_backward(const double* w, const double* in, const double* dout, double* dw, double* db,
                   double* din, Index c_in, Index h, Index wd, Index c_out, Index oh, Index ow) {
    for (Index o = 0; o < c_out; ++o) {
        const double* wo = w + o * c_in * 9;
        double* dwo = dw + o * c_in * 9;
        const double* douto = dout + o * oh * ow;
        for (Index y = 0; y < oh; ++y) {
            for (Index x = 0; x < ow; ++x) {
                const double g = douto[y * ow + x];
                if (g == 0.0) continue;
                db[o] += g;
                for (Index i = 0; i < c_in; ++i) {
                    const double* ini = in + i * h * wd;
                    double* dini = din ? din + i * h * wd : nullptr;
                    const double* wi = wo + i * 9;
                    double* dwi = dwo + i * 9;
                    for (Index ky = 0; ky < 3; ++ky) {
                        const Index yy = clamp_idx(2 * y - 1 + ky, h);
                        for (Index kx = 0; kx < 3; ++kx) {
                            const Index xx = clamp_idx(2 * x - 1 + kx, wd);
                            dwi[ky * 3 + kx] += g * ini[yy * wd + xx];
                            if (dini) dini[yy * wd + xx] += g * wi[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

struct CnnOffsets {
    // per layer: weight, bias, gamma, beta; then dense weight, dense bias
    std::array<Index, 4> w, b, gamma, beta;
    Index dense_w = 0, dense_b = 0, total = 0;
};

CnnOffsets cnn_offsets(const CnnSpec& spec) {
    const CnnDims d = cnn_dims(spec);
    CnnOffsets off;
    Index p = 0;
    for (int l = 0; l < 4; ++l) {
        off.w[l] = p;
        p += d.out_c[l] * d.in_c[l] * 9;
        off.b[l] = p;
        p += d.out_c[l];
        off.gamma[l] = p;
        p += d.out_c[l];
        off.beta[l] = p;
        p += d.out_c[l];
    }
    off.dense_w = p;
    p += spec.embed_dim * d.last_channels;
    off.dense_b = p;
    p += spec.embed_dim;
    off.total = p;
    return off;
}

} // namespace

// ---------------------------------------------------------------------------
// MLP

Index mlp_param_count(const MlpSpec& s) {
    return s.hidden1 * s.in_dim + s.hidden1 + s.hidden2 * s.hidden1 + s.hidden2 +
           s.out_dim * s.hidden2 + s.out_dim;
}

std::vector<std::tuple<std::string, Index, Index>> mlp_param_layout(const MlpSpec& s) {
    std::vector<std::tuple<std::string, Index, Index>> out;
    Index p = 0;
    auto push = [&](const std::string& name, Index size) {
        out.emplace_back(name, p, size);
        p += size;
    };
    push("w1", s.hidden1 * s.in_dim);
    push("b1", s.hidden1);
    push("w2", s.hidden2 * s.hidden1);
    push("b2", s.hidden2);
    push("w3", s.out_dim * s.hidden2);
    push("b3", s.out_dim);
    return out;
}

Vector mlp_init(const MlpSpec& s, std::uint64_t seed) {
    Vector p = Vector::Zero(mlp_param_count(s));
    Rng rng(seed);
    Index at = 0;
    auto fill = [&](Index count, Index fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Index i = 0; i < count; ++i) p[at + i] = rng.uniform(-bound, bound);
        at += count;
    };
    fill(s.hidden1 * s.in_dim, s.in_dim);
    at += s.hidden1; // b1 zero
    fill(s.hidden2 * s.hidden1, s.hidden1);
    at += s.hidden2;
    fill(s.out_dim * s.hidden2, s.hidden2);
    return p;
}

void MlpTape::clear() {
    input.resize(0, 0);
    pre1.resize(0, 0);
    act1.resize(0, 0);
    pre2.resize(0, 0);
    act2.resize(0, 0);
    cleared = true;
}

Matrix mlp_forward(const MlpSpec& s, const Vector& params, const Matrix& input, MlpTape* tape) {
    if (input.rows() != s.in_dim) throw std::invalid_argument("mlp_forward: input dim mismatch");
    if (params.size() != mlp_param_count(s))
        throw std::invalid_argument("mlp_forward: parameter count mismatch");

    const double* p = params.data();
    Map<const Matrix> w1(p, s.hidden1, s.in_dim);
    Map<const Vector> b1(p + s.hidden1 * s.in_dim, s.hidden1);
    const double* p2 = p + s.hidden1 * s.in_dim + s.hidden1;
    Map<const Matrix> w2(p2, s.hidden2, s.hidden1);
    Map<const Vector> b2(p2 + s.hidden2 * s.hidden1, s.hidden2);
    const double* p3 = p2 + s.hidden2 * s.hidden1 + s.hidden2;
    Map<const Matrix> w3(p3, s.out_dim, s.hidden2);
    Map<const Vector> b3(p3 + s.out_dim * s.hidden2, s.out_dim);

    Matrix pre1 = (w1 * input).colwise() + b1;
    Matrix act1 = silu_mat(pre1);
    Matrix pre2 = (w2 * act1).colwise() + b2;
    Matrix act2 = silu_mat(pre2);
    Matrix out = (w3 * act2).colwise() + b3;

    if (tape) {
        tape->input = input;
        tape->pre1 = std::move(pre1);
        tape->act1 = std::move(act1);
        tape->pre2 = std::move(pre2);
        tape->act2 = std::move(act2);
        tape->cleared = false;
    }
    return out;
}

Matrix mlp_backward(const MlpSpec& s, const Vector& params, const MlpTape& tape,
                    const Matrix& output_grad, Eigen::Ref<Vector> param_grads) {
    if (tape.cleared) throw std::logic_error("mlp_backward: tape already cleared");
    if (output_grad.rows() != s.out_dim)
        throw std::invalid_argument("mlp_backward: output grad dim mismatch");
    if (param_grads.size() != mlp_param_count(s))
        throw std::invalid_argument("mlp_backward: gradient buffer size mismatch");

    const double* p = params.data();
    Map<const Matrix> w1(p, s.hidden1, s.in_dim);
    const double* p2 = p + s.hidden1 * s.in_dim + s.hidden1;
    Map<const Matrix> w2(p2, s.hidden2, s.hidden1);
    const double* p3 = p2 + s.hidden2 * s.hidden1 + s.hidden2;
    Map<const Matrix> w3(p3, s.out_dim, s.hidden2);

    double* g = param_grads.data();
    Map<Matrix> dw1(g, s.hidden1, s.in_dim);
    Map<Vector> db1(g + s.hidden1 * s.in_dim, s.hidden1);
    double* g2 = g + s.hidden1 * s.in_dim + s.hidden1;
    Map<Matrix> dw2(g2, s.hidden2, s.hidden1);
    Map<Vector> db2(g2 + s.hidden2 * s.hidden1, s.hidden2);
    double* g3 = g2 + s.hidden2 * s.hidden1 + s.hidden2;
    Map<Matrix> dw3(g3, s.out_dim, s.hidden2);
    Map<Vector> db3(g3 + s.out_dim * s.hidden2, s.out_dim);

    dw3 += output_grad * tape.act2.transpose();
    db3 += output_grad.rowwise().sum();
    Matrix dact2 = w3.transpose() * output_grad;
    Matrix dpre2 = dact2.cwiseProduct(silu_deriv_mat(tape.pre2));

    dw2 += dpre2 * tape.act1.transpose();
    db2 += dpre2.rowwise().sum();
    Matrix dact1 = w2.transpose() * dpre2;
    Matrix dpre1 = dact1.cwiseProduct(silu_deriv_mat(tape.pre1));

    dw1 += dpre1 * tape.input.transpose();
    db1 += dpre1.rowwise().sum();
    return w1.transpose() * dpre1;
}

// ---------------------------------------------------------------------------
// CNN

Index cnn_param_count(const CnnSpec& spec) { return cnn_offsets(spec).total; }

std::vector<std::tuple<std::string, Index, Index>> cnn_param_layout(const CnnSpec& spec) {
    const CnnDims d = cnn_dims(spec);
    const CnnOffsets off = cnn_offsets(spec);
    std::vector<std::tuple<std::string, Index, Index>> out;
    for (int l = 0; l < 4; ++l) {
        const std::string tag = "conv" + std::to_string(l + 1);
        out.emplace_back(tag + ".w", off.w[l], d.out_c[l] * d.in_c[l] * 9);
        out.emplace_back(tag + ".b", off.b[l], d.out_c[l]);
        out.emplace_back(tag + ".gamma", off.gamma[l], d.out_c[l]);
        out.emplace_back(tag + ".beta", off.beta[l], d.out_c[l]);
    }
    out.emplace_back("dense.w", off.dense_w, spec.embed_dim * d.last_channels);
    out.emplace_back("dense.b", off.dense_b, spec.embed_dim);
    return out;
}

Vector cnn_init(const CnnSpec& spec, std::uint64_t seed) {
    const CnnDims d = cnn_dims(spec);
    const CnnOffsets off = cnn_offsets(spec);
    Vector p = Vector::Zero(off.total);
    Rng rng(seed);
    for (int l = 0; l < 4; ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d.in_c[l] * 9));
        for (Index i = 0; i < d.out_c[l] * d.in_c[l] * 9; ++i)
            p[off.w[l] + i] = rng.uniform(-bound, bound);
        p.segment(off.gamma[l], d.out_c[l]).setOnes();
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.last_channels));
    for (Index i = 0; i < spec.embed_dim * d.last_channels; ++i)
        p[off.dense_w + i] = rng.uniform(-bound, bound);
    return p;
}

void CnnTape::clear() {
    for (auto& v : input) v.resize(0);
    for (auto& v : conv_out) v.resize(0);
    for (auto& v : xhat) v.resize(0);
    for (auto& v : affine) v.resize(0);
    pooled.resize(0);
    cleared = true;
}

Vector cnn_forward(const CnnSpec& spec, const Vector& params, const Vector& field,
                   CnnTape* tape) {
    const CnnDims d = cnn_dims(spec);
    const CnnOffsets off = cnn_offsets(spec);
    if (spec.height < 16 || spec.width < 16)
        throw std::invalid_argument("cnn_forward: field must be at least 16x16");
    if (field.size() != spec.in_channels * spec.height * spec.width)
        throw std::invalid_argument("cnn_forward: field size mismatch");
    if (params.size() != off.total)
        throw std::invalid_argument("cnn_forward: parameter count mismatch");

    CnnTape local;
    CnnTape& t = tape ? *tape : local;
    t.cleared = false;

    Vector current = field;
    for (int l = 0; l < 4; ++l) {
        const Index oc = d.out_c[l], oh = d.out_h[l], ow = d.out_w[l];
        const Index spatial = oh * ow;
        t.input[static_cast<std::size_t>(l)] = current;

        Vector conv(oc * spatial);
        conv_forward(params.data() + off.w[l], params.data() + off.b[l], current.data(),
                     conv.data(), d.in_c[l], d.in_h[l], d.in_w[l], oc, oh, ow);

        // Group normalization over (channels-in-group x spatial).
        const Index gs = oc / spec.groups;
        Vector mean(spec.groups), var(spec.groups);
        Vector xhat(oc * spatial), affine(oc * spatial);
        for (Index g = 0; g < spec.groups; ++g) {
            const Index base = g * gs * spatial;
            const Index count = gs * spatial;
            const double mu = conv.segment(base, count).mean();
            const double v = (conv.segment(base, count).array() - mu).square().mean();
            mean[g] = mu;
            var[g] = v;
            const double inv_std = 1.0 / std::sqrt(v + spec.gn_epsilon);
            for (Index c = g * gs; c < (g + 1) * gs; ++c) {
                const double gamma = params[off.gamma[l] + c];
                const double beta = params[off.beta[l] + c];
                for (Index s = 0; s < spatial; ++s) {
                    const double xh = (conv[c * spatial + s] - mu) * inv_std;
                    xhat[c * spatial + s] = xh;
                    affine[c * spatial + s] = gamma * xh + beta;
                }
            }
        }

        Vector activated(oc * spatial);
        for (Index i = 0; i < activated.size(); ++i) activated[i] = silu(affine[i]);

        t.conv_out[static_cast<std::size_t>(l)] = std::move(conv);
        t.xhat[static_cast<std::size_t>(l)] = std::move(xhat);
        t.affine[static_cast<std::size_t>(l)] = std::move(affine);
        t.group_mean[static_cast<std::size_t>(l)] = std::move(mean);
        t.group_var[static_cast<std::size_t>(l)] = std::move(var);
        current = std::move(activated);
    }

    // Global average pool then dense head.
    const Index cl = d.last_channels;
    const Index spatial = d.out_h[3] * d.out_w[3];
    Vector pooled(cl);
    for (Index c = 0; c < cl; ++c)
        pooled[c] = current.segment(c * spatial, spatial).mean();
    t.pooled = pooled;

    Map<const Matrix> wd(params.data() + off.dense_w, spec.embed_dim, cl);
    Map<const Vector> bd(params.data() + off.dense_b, spec.embed_dim);
    return wd * pooled + bd;
}

Vector cnn_backward(const CnnSpec& spec, const Vector& params, const CnnTape& tape,
                    const Vector& embed_grad, Eigen::Ref<Vector> param_grads) {
    if (tape.cleared) throw std::logic_error("cnn_backward: tape already cleared");
    const CnnDims d = cnn_dims(spec);
    const CnnOffsets off = cnn_offsets(spec);
    if (embed_grad.size() != spec.embed_dim)
        throw std::invalid_argument("cnn_backward: embedding grad dim mismatch");
    if (param_grads.size() != off.total)
        throw std::invalid_argument("cnn_backward: gradient buffer size mismatch");

    const Index cl = d.last_channels;
    const Index last_spatial = d.out_h[3] * d.out_w[3];

    Map<const Matrix> wd(params.data() + off.dense_w, spec.embed_dim, cl);
    Map<Matrix> dwd(param_grads.data() + off.dense_w, spec.embed_dim, cl);
    Map<Vector> dbd(param_grads.data() + off.dense_b, spec.embed_dim);

    dwd += embed_grad * tape.pooled.transpose();
    dbd += embed_grad;
    Vector dpooled = wd.transpose() * embed_grad;

    // Pool backward: spread evenly over the last activation map.
    Vector dcurrent(cl * last_spatial);
    for (Index c = 0; c < cl; ++c)
        dcurrent.segment(c * last_spatial, last_spatial)
            .setConstant(dpooled[c] / static_cast<double>(last_spatial));

    for (int l = 3; l >= 0; --l) {
        const Index oc = d.out_c[l], oh = d.out_h[l], ow = d.out_w[l];
        const Index spatial = oh * ow;
        const Index gs = oc / spec.groups;
        const auto li = static_cast<std::size_t>(l);

        // SiLU backward.
        Vector daffine(oc * spatial);
        for (Index i = 0; i < daffine.size(); ++i)
            daffine[i] = dcurrent[i] * silu_deriv(tape.affine[li][i]);

        // Group-norm backward.
        Vector dconv(oc * spatial);
        for (Index g = 0; g < spec.groups; ++g) {
            const double inv_std = 1.0 / std::sqrt(tape.group_var[li][g] + spec.gn_epsilon);
            const auto count = static_cast<double>(gs * spatial);

            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (Index c = g * gs; c < (g + 1) * gs; ++c) {
                const double gamma = params[off.gamma[l] + c];
                double dgamma = 0.0, dbeta = 0.0;
                for (Index s = 0; s < spatial; ++s) {
                    const Index idx = c * spatial + s;
                    const double da = daffine[idx];
                    const double xh = tape.xhat[li][idx];
                    dgamma += da * xh;
                    dbeta += da;
                    const double dxh = da * gamma;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh;
                }
                param_grads[off.gamma[l] + c] += dgamma;
                param_grads[off.beta[l] + c] += dbeta;
            }
            for (Index c = g * gs; c < (g + 1) * gs; ++c) {
                const double gamma = params[off.gamma[l] + c];
                for (Index s = 0; s < spatial; ++s) {
                    const Index idx = c * spatial + s;
                    const double dxh = daffine[idx] * gamma;
                    dconv[idx] = inv_std * (dxh - sum_dxhat / count -
                                            tape.xhat[li][idx] * sum_dxhat_xhat / count);
                }
            }
        }

        // Conv backward.
        Vector din = Vector::Zero(d.in_c[l] * d.in_h[l] * d.in_w[l]);
        conv_backward(params.data() + off.w[l], tape.input[li].data(), dconv.data(),
                      param_grads.data() + off.w[l], param_grads.data() + off.b[l], din.data(),
                      d.in_c[l], d.in_h[l], d.in_w[l], oc, oh, ow);
        dcurrent = std::move(din);
    }
    return dcurrent;
}

void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamConfig& config) {
    if (grads.size() != params.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    if (!grads.allFinite()) throw NumericError("adam_step: non-finite gradient (training abort)");
    if (state.m.size() != params.size()) {
        state.m = Vector::Zero(params.size());
        state.v = Vector::Zero(params.size());
        state.step = 0;
    }
    ++state.step;
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads;
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads.cwiseProduct(grads);
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    params -= (config.lr / bc1) * state.m.cwiseQuotient(
                  ((state.v / bc2).cwiseSqrt().array() + config.epsilon).matrix());
}

} // namespace terom::nn
