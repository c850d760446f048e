#include "wmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "wmlab/errors.hpp"
#include "wmlab/kernels.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

std::string to_string(ModelKind k) { return k == ModelKind::Mlp ? "mlp" : "cnn"; }

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "cnn" || s == "smallcnn") return ModelKind::SmallCnn;
    throw std::invalid_argument("unknown model kind: " + s);
}

ModelSpec ModelSpec::mlp(int h, int w, int c, int classes) {
    ModelSpec s;
    s.kind = ModelKind::Mlp;
    s.input_h = h;
    s.input_w = w;
    s.input_c = c;
    s.classes = classes;
    s.validate();
    return s;
}

ModelSpec ModelSpec::small_cnn(int h, int w, int c, int classes) {
    ModelSpec s;
    s.kind = ModelKind::SmallCnn;
    s.input_h = h;
    s.input_w = w;
    s.input_c = c;
    s.classes = classes;
    s.validate();
    return s;
}

void ModelSpec::validate() const {
    if (classes < 2) throw std::invalid_argument("model spec: classes must be >= 2");
    if (input_h <= 0 || input_w <= 0 || input_c <= 0)
        throw std::invalid_argument("model spec: input dims must be positive");
    if (kind == ModelKind::Mlp) {
        for (int w : hidden)
            if (w < 1) throw std::invalid_argument("model spec: hidden width must be >= 1");
    } else {
        if (channels.size() != 2) throw std::invalid_argument("model spec: SmallCnn needs 2 conv channels");
        for (int c : channels)
            if (c < 1) throw std::invalid_argument("model spec: conv channels must be >= 1");
        if (input_h % 4 != 0 || input_w % 4 != 0)
            throw std::invalid_argument("model spec: SmallCnn needs input height/width divisible by 4");
    }
}

std::vector<std::pair<std::string, std::vector<int>>> ModelSpec::param_layout() const {
    validate();
    std::vector<std::pair<std::string, std::vector<int>>> layout;
    if (kind == ModelKind::Mlp) {
        int in = input_count();
        for (size_t l = 0; l < hidden.size(); ++l) {
            std::string base = "fc" + std::to_string(l + 1);
            layout.push_back({base + ".weight", {hidden[l], in}});
            layout.push_back({base + ".bias", {hidden[l]}});
            in = hidden[l];
        }
        layout.push_back({"out.weight", {classes, in}});
        layout.push_back({"out.bias", {classes}});
    } else {
        layout.push_back({"conv1.weight", {channels[0], 3, 3, input_c}});
        layout.push_back({"conv1.bias", {channels[0]}});
        layout.push_back({"conv2.weight", {channels[1], 3, 3, channels[0]}});
        layout.push_back({"conv2.bias", {channels[1]}});
        int feat = (input_h / 4) * (input_w / 4) * channels[1];
        layout.push_back({"out.weight", {classes, feat}});
        layout.push_back({"out.bias", {classes}});
    }
    return layout;
}

std::vector<std::string> ModelSpec::layer_groups() const {
    std::vector<std::string> groups;
    if (kind == ModelKind::Mlp) {
        for (size_t l = 0; l < hidden.size(); ++l) groups.push_back("fc" + std::to_string(l + 1));
    } else {
        groups.push_back("conv1");
        groups.push_back("conv2");
    }
    groups.push_back("out");
    return groups;
}

bool operator==(const ModelSpec& a, const ModelSpec& b) {
    return a.kind == b.kind && a.input_h == b.input_h && a.input_w == b.input_w &&
           a.input_c == b.input_c && a.classes == b.classes && a.hidden == b.hidden &&
           a.channels == b.channels;
}

Model Model::zeros(const ModelSpec& spec) {
    Model m;
    m.spec = spec;
    for (const auto& [name, shape] : spec.param_layout()) {
        m.names.push_back(name);
        m.params.emplace_back(shape);
    }
    return m;
}

Model Model::init(const ModelSpec& spec, uint64_t seed) {
    Model m = zeros(spec);
    auto rng = make_rng(seed);
    for (size_t i = 0; i < m.params.size(); ++i) {
        Tensor& p = m.params[i];
        if (p.rank() == 1) continue;  // biases stay zero
        int fan_in = 1;
        for (int d = 1; d < p.rank(); ++d) fan_in *= p.dim(d);
        float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
        std::uniform_real_distribution<float> dist(-limit, limit);
        for (float& v : p.data) v = dist(rng);
    }
    return m;
}

size_t Model::param_count() const {
    size_t n = 0;
    for (const Tensor& p : params) n += p.size();
    return n;
}

std::vector<float> Model::flatten() const {
    std::vector<float> v;
    v.reserve(param_count());
    for (const Tensor& p : params) v.insert(v.end(), p.data.begin(), p.data.end());
    return v;
}

void Model::unflatten(const std::vector<float>& v) {
    if (v.size() != param_count())
        throw std::invalid_argument("unflatten: got " + std::to_string(v.size()) + " values, need " +
                                    std::to_string(param_count()));
    size_t off = 0;
    for (Tensor& p : params) {
        std::copy(v.begin() + off, v.begin() + off + p.size(), p.data.begin());
        off += p.size();
    }
}

int Model::param_index(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("no parameter named " + name);
}

const Tensor& Model::param(const std::string& name) const { return params[param_index(name)]; }
Tensor& Model::param(const std::string& name) { return params[param_index(name)]; }

ParamVector zeros_like(const Model& m) {
    ParamVector g;
    g.reserve(m.params.size());
    for (const Tensor& p : m.params) g.emplace_back(p.shape);
    return g;
}

// ---------------------------------------------------------------------------
// forward / backward kernels
// ---------------------------------------------------------------------------

namespace {

// References into the pools stay valid across later scratch() calls, so keep
// the outer vectors from ever reallocating.
std::vector<float>& scratch(std::vector<std::vector<float>>& pool, size_t slot, size_t n) {
    if (pool.capacity() < 16) pool.reserve(16);
    if (pool.size() <= slot) pool.resize(slot + 1);
    pool[slot].assign(n, 0.0f);
    return pool[slot];
}

std::vector<double>& scratch64(std::vector<std::vector<double>>& pool, size_t slot, size_t n) {
    if (pool.capacity() < 16) pool.reserve(16);
    if (pool.size() <= slot) pool.resize(slot + 1);
    pool[slot].assign(n, 0.0);
    return pool[slot];
}

// y[b,o] = dot(x[b,:], w[o,:]) + bias[o]
void dense_forward(const float* x, const float* w, const float* bias, float* y, int rows, int in,
                   int out) {
    for (int b = 0; b < rows; ++b) {
        const float* xr = x + static_cast<size_t>(b) * in;
        float* yr = y + static_cast<size_t>(b) * out;
        for (int o = 0; o < out; ++o)
            yr[o] = static_cast<float>(dot_f32_f64(xr, w + static_cast<size_t>(o) * in, in) +
                                       static_cast<double>(bias[o]));
    }
}

// dW[o,i] += sum_b dy[b,o] x[b,i];  db[o] += sum_b dy[b,o];  dx[b,i] = sum_o dy[b,o] w[o,i]
void dense_backward(const float* x, const float* w, const float* dy, int rows, int in, int out,
                    double* dw, double* db, std::vector<double>& dx_acc, float* dx) {
    for (int b = 0; b < rows; ++b) {
        const float* xr = x + static_cast<size_t>(b) * in;
        const float* dyr = dy + static_cast<size_t>(b) * out;
        for (int o = 0; o < out; ++o) {
            const double g = static_cast<double>(dyr[o]);
            if (g == 0.0) continue;
            axpy_f32_f64(g, xr, dw + static_cast<size_t>(o) * in, in);
            db[o] += g;
        }
    }
    if (!dx) return;
    for (int b = 0; b < rows; ++b) {
        const float* dyr = dy + static_cast<size_t>(b) * out;
        dx_acc.assign(static_cast<size_t>(in), 0.0);
        for (int o = 0; o < out; ++o) {
            const double g = static_cast<double>(dyr[o]);
            if (g == 0.0) continue;
            axpy_f32_f64(g, w + static_cast<size_t>(o) * in, dx_acc.data(), in);
        }
        float* dxr = dx + static_cast<size_t>(b) * in;
        for (int i = 0; i < in; ++i) dxr[i] = static_cast<float>(dx_acc[i]);
    }
}

void relu_forward(float* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

// dz = dy where the stored post-relu activation is positive, else 0
void relu_backward(const float* act, float* dy, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (act[i] <= 0.0f) dy[i] = 0.0f;
}

// 3x3 patches with 1-pixel zero padding, NHWC -> rows [B*H*W, 9*C]
void im2col3(const float* x, int batch, int h, int w, int c, float* cols) {
    const int patch = 9 * c;
    for (int b = 0; b < batch; ++b) {
        const float* img = x + static_cast<size_t>(b) * h * w * c;
        float* crow = cols + static_cast<size_t>(b) * h * w * patch;
        for (int oy = 0; oy < h; ++oy) {
            for (int ox = 0; ox < w; ++ox) {
                float* dst = crow + static_cast<size_t>(oy * w + ox) * patch;
                int k = 0;
                for (int ky = -1; ky <= 1; ++ky) {
                    const int iy = oy + ky;
                    for (int kx = -1; kx <= 1; ++kx) {
                        const int ix = ox + kx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            const float* src = img + (static_cast<size_t>(iy) * w + ix) * c;
                            for (int ch = 0; ch < c; ++ch) dst[k++] = src[ch];
                        } else {
                            for (int ch = 0; ch < c; ++ch) dst[k++] = 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// scatter-add of patch-row gradients back onto the padded image
void col2im3(const float* dcols, int batch, int h, int w, int c, std::vector<double>& acc,
             float* dx) {
    const int patch = 9 * c;
    acc.assign(static_cast<size_t>(batch) * h * w * c, 0.0);
    for (int b = 0; b < batch; ++b) {
        double* img = acc.data() + static_cast<size_t>(b) * h * w * c;
        const float* crow = dcols + static_cast<size_t>(b) * h * w * patch;
        for (int oy = 0; oy < h; ++oy) {
            for (int ox = 0; ox < w; ++ox) {
                const float* src = crow + static_cast<size_t>(oy * w + ox) * patch;
                int k = 0;
                for (int ky = -1; ky <= 1; ++ky) {
                    const int iy = oy + ky;
                    for (int kx = -1; kx <= 1; ++kx) {
                        const int ix = ox + kx;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                            double* dst = img + (static_cast<size_t>(iy) * w + ix) * c;
                            for (int ch = 0; ch < c; ++ch) dst[ch] += static_cast<double>(src[k++]);
                        } else {
                            k += c;
                        }
                    }
                }
            }
        }
    }
    const size_t n = acc.size();
    for (size_t i = 0; i < n; ++i) dx[i] = static_cast<float>(acc[i]);
}

// 2x2 stride-2 max pooling, NHWC; idx stores the flat input offset of the max
void maxpool2_forward(const float* x, int batch, int h, int w, int c, float* y, int* idx) {
    const int oh = h / 2;
    const int ow = w / 2;
    for (int b = 0; b < batch; ++b) {
        const size_t ibase = static_cast<size_t>(b) * h * w * c;
        const size_t obase = static_cast<size_t>(b) * oh * ow * c;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int ch = 0; ch < c; ++ch) {
                    float best = -1e30f;
                    size_t best_at = 0;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const size_t at =
                                ibase + ((static_cast<size_t>(oy * 2 + dy) * w) + (ox * 2 + dx)) * c + ch;
                            if (x[at] > best) {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    const size_t o = obase + (static_cast<size_t>(oy) * ow + ox) * c + ch;
                    y[o] = best;
                    idx[o] = static_cast<int>(best_at - ibase);
                }
            }
        }
    }
}

void maxpool2_backward(const float* dy, const int* idx, int batch, int h, int w, int c, float* dx) {
    const int oh = h / 2;
    const int ow = w / 2;
    std::fill(dx, dx + static_cast<size_t>(batch) * h * w * c, 0.0f);
    const size_t per_out = static_cast<size_t>(oh) * ow * c;
    for (int b = 0; b < batch; ++b) {
        const size_t ibase = static_cast<size_t>(b) * h * w * c;
        const size_t obase = static_cast<size_t>(b) * per_out;
        for (size_t o = 0; o < per_out; ++o) dx[ibase + idx[obase + o]] += dy[obase + o];
    }
}

// softmax cross-entropy; returns mean loss, writes d(loss)/d(logits) if asked
double softmax_xent(const float* logits, const std::vector<int>& labels, int rows, int k,
                    float* dlogits) {
    double total = 0.0;
    for (int b = 0; b < rows; ++b) {
        const float* lr = logits + static_cast<size_t>(b) * k;
        double m = lr[0];
        for (int i = 1; i < k; ++i) m = std::max(m, static_cast<double>(lr[i]));
        double s = 0.0;
        for (int i = 0; i < k; ++i) s += std::exp(static_cast<double>(lr[i]) - m);
        const double lse = m + std::log(s);
        total += lse - static_cast<double>(lr[labels[static_cast<size_t>(b)]]);
        if (dlogits) {
            float* dr = dlogits + static_cast<size_t>(b) * k;
            for (int i = 0; i < k; ++i) {
                const double p = std::exp(static_cast<double>(lr[i]) - lse);
                dr[i] = static_cast<float>(p / rows);
            }
            dr[labels[static_cast<size_t>(b)]] -= 1.0f / static_cast<float>(rows);
        }
    }
    return total / rows;
}

int batch_rows(const ModelSpec& spec, const Tensor& batch) {
    if (batch.rank() == 4) {
        if (batch.dim(1) != spec.input_h || batch.dim(2) != spec.input_w ||
            batch.dim(3) != spec.input_c)
            throw std::invalid_argument("batch shape " + shape_str(batch.shape) +
                                        " does not match model input " +
                                        std::to_string(spec.input_h) + "x" +
                                        std::to_string(spec.input_w) + "x" +
                                        std::to_string(spec.input_c));
        return batch.dim(0);
    }
    if (batch.rank() == 2 && spec.kind == ModelKind::Mlp) {
        if (batch.dim(1) != spec.input_count())
            throw std::invalid_argument("flat batch width " + std::to_string(batch.dim(1)) +
                                        " does not match model input count " +
                                        std::to_string(spec.input_count()));
        return batch.dim(0);
    }
    throw std::invalid_argument("unsupported batch shape " + shape_str(batch.shape));
}

// Runs the network, keeping per-layer activations in ws for the backward pass.
// Returns the index of the logits buffer in ws.acts.
size_t forward_impl(const Model& m, const Tensor& batch, int rows, GradWorkspace& ws) {
    const ModelSpec& spec = m.spec;
    if (spec.kind == ModelKind::Mlp) {
        const int depth = static_cast<int>(spec.hidden.size());
        size_t slot = 0;
        {
            auto& a0 = scratch(ws.acts, slot, batch.size());
            std::copy(batch.data.begin(), batch.data.end(), a0.begin());
        }
        int in = spec.input_count();
        for (int l = 0; l < depth; ++l) {
            const Tensor& w = m.params[static_cast<size_t>(2 * l)];
            const Tensor& b = m.params[static_cast<size_t>(2 * l + 1)];
            const int out = spec.hidden[static_cast<size_t>(l)];
            auto& z = scratch(ws.acts, slot + 1, static_cast<size_t>(rows) * out);
            dense_forward(ws.acts[slot].data(), w.ptr(), b.ptr(), z.data(), rows, in, out);
            relu_forward(z.data(), z.size());
            ++slot;
            in = out;
        }
        const Tensor& w = m.params[m.params.size() - 2];
        const Tensor& b = m.params[m.params.size() - 1];
        auto& logits = scratch(ws.acts, slot + 1, static_cast<size_t>(rows) * spec.classes);
        dense_forward(ws.acts[slot].data(), w.ptr(), b.ptr(), logits.data(), rows, in, spec.classes);
        return slot + 1;
    }

    // SmallCnn: acts layout
    //   0 input, 1 cols1, 2 relu1, 3 pool1, 4 cols2, 5 relu2, 6 pool2, 7 logits
    const int h = spec.input_h, w = spec.input_w, c = spec.input_c;
    const int c1 = spec.channels[0], c2 = spec.channels[1];
    const int h2 = h / 2, w2 = w / 2, h4 = h / 4, w4 = w / 4;
    {
        auto& a0 = scratch(ws.acts, 0, batch.size());
        std::copy(batch.data.begin(), batch.data.end(), a0.begin());
    }
    auto& cols1 = scratch(ws.acts, 1, static_cast<size_t>(rows) * h * w * 9 * c);
    im2col3(ws.acts[0].data(), rows, h, w, c, cols1.data());
    auto& z1 = scratch(ws.acts, 2, static_cast<size_t>(rows) * h * w * c1);
    dense_forward(cols1.data(), m.params[0].ptr(), m.params[1].ptr(), z1.data(), rows * h * w,
                  9 * c, c1);
    relu_forward(z1.data(), z1.size());
    auto& p1 = scratch(ws.acts, 3, static_cast<size_t>(rows) * h2 * w2 * c1);
    if (ws.pool_idx.size() < 2) ws.pool_idx.resize(2);
    ws.pool_idx[0].assign(p1.size(), 0);
    maxpool2_forward(z1.data(), rows, h, w, c1, p1.data(), ws.pool_idx[0].data());

    auto& cols2 = scratch(ws.acts, 4, static_cast<size_t>(rows) * h2 * w2 * 9 * c1);
    im2col3(p1.data(), rows, h2, w2, c1, cols2.data());
    auto& z2 = scratch(ws.acts, 5, static_cast<size_t>(rows) * h2 * w2 * c2);
    dense_forward(cols2.data(), m.params[2].ptr(), m.params[3].ptr(), z2.data(), rows * h2 * w2,
                  9 * c1, c2);
    relu_forward(z2.data(), z2.size());
    auto& p2 = scratch(ws.acts, 6, static_cast<size_t>(rows) * h4 * w4 * c2);
    ws.pool_idx[1].assign(p2.size(), 0);
    maxpool2_forward(z2.data(), rows, h2, w2, c2, p2.data(), ws.pool_idx[1].data());

    auto& logits = scratch(ws.acts, 7, static_cast<size_t>(rows) * spec.classes);
    dense_forward(p2.data(), m.params[4].ptr(), m.params[5].ptr(), logits.data(), rows,
                  h4 * w4 * c2, spec.classes);
    return 7;
}

}  // namespace

Tensor forward(const Model& m, const Tensor& batch) {
    const int rows = batch_rows(m.spec, batch);
    GradWorkspace ws;
    const size_t slot = forward_impl(m, batch, rows, ws);
    Tensor logits({rows, m.spec.classes});
    std::copy(ws.acts[slot].begin(), ws.acts[slot].end(), logits.data.begin());
    if (!logits.all_finite()) throw DivergedError("non-finite logits in forward pass");
    return logits;
}

LossGrads loss_and_grads(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                         GradWorkspace* ws_in) {
    const ModelSpec& spec = m.spec;
    const int rows = batch_rows(spec, batch);
    if (static_cast<int>(labels.size()) != rows)
        throw std::invalid_argument("labels count does not match batch rows");
    for (int y : labels)
        if (y < 0 || y >= spec.classes) throw std::invalid_argument("label out of [0,K)");

    GradWorkspace local;
    GradWorkspace& ws = ws_in ? *ws_in : local;
    const size_t logit_slot = forward_impl(m, batch, rows, ws);

    LossGrads out;
    out.grads = zeros_like(m);
    const int k = spec.classes;
    auto& dlogits = scratch(ws.f32, 0, static_cast<size_t>(rows) * k);
    out.loss = softmax_xent(ws.acts[logit_slot].data(), labels, rows, k, dlogits.data());
    if (!std::isfinite(out.loss)) throw DivergedError("non-finite loss");

    auto dense_back_to = [&](const Tensor& w, const float* x, const float* dy, int bw_rows, int in,
                             int outn, Tensor& dw_t, Tensor& db_t, float* dx) {
        auto& dw = scratch64(ws.f64, 0, static_cast<size_t>(outn) * in);
        auto& db = scratch64(ws.f64, 1, static_cast<size_t>(outn));
        auto& row = scratch64(ws.f64, 2, static_cast<size_t>(in));
        dense_backward(x, w.ptr(), dy, bw_rows, in, outn, dw.data(), db.data(), row, dx);
        for (size_t i = 0; i < dw.size(); ++i) dw_t.data[i] = static_cast<float>(dw[i]);
        for (size_t i = 0; i < db.size(); ++i) db_t.data[i] = static_cast<float>(db[i]);
    };

    if (spec.kind == ModelKind::Mlp) {
        const int depth = static_cast<int>(spec.hidden.size());
        int in_last = depth > 0 ? spec.hidden.back() : spec.input_count();
        auto& dx_buf = scratch(ws.f32, 1, static_cast<size_t>(rows) * in_last);
        dense_back_to(m.params[m.params.size() - 2], ws.acts[static_cast<size_t>(depth)].data(),
                      dlogits.data(), rows, in_last, k, out.grads[out.grads.size() - 2],
                      out.grads[out.grads.size() - 1], depth > 0 ? dx_buf.data() : nullptr);
        for (int l = depth - 1; l >= 0; --l) {
            const int out_l = spec.hidden[static_cast<size_t>(l)];
            const int in_l = l > 0 ? spec.hidden[static_cast<size_t>(l - 1)] : spec.input_count();
            relu_backward(ws.acts[static_cast<size_t>(l + 1)].data(), ws.f32[1].data(),
                          static_cast<size_t>(rows) * out_l);
            auto& dprev = scratch(ws.f32, 2, static_cast<size_t>(rows) * in_l);
            dense_back_to(m.params[static_cast<size_t>(2 * l)], ws.acts[static_cast<size_t>(l)].data(),
                          ws.f32[1].data(), rows, in_l, out_l, out.grads[static_cast<size_t>(2 * l)],
                          out.grads[static_cast<size_t>(2 * l + 1)], l > 0 ? dprev.data() : nullptr);
            if (l > 0) ws.f32[1].swap(ws.f32[2]);
        }
        return out;
    }

    const int h = spec.input_h, w = spec.input_w, c1 = spec.channels[0], c2 = spec.channels[1];
    const int h2 = h / 2, w2 = w / 2, h4 = h / 4, w4 = w / 4;
    const int feat = h4 * w4 * c2;

    auto& dp2 = scratch(ws.f32, 1, static_cast<size_t>(rows) * feat);
    dense_back_to(m.params[4], ws.acts[6].data(), dlogits.data(), rows, feat, k, out.grads[4],
                  out.grads[5], dp2.data());

    auto& dz2 = scratch(ws.f32, 2, static_cast<size_t>(rows) * h2 * w2 * c2);
    maxpool2_backward(dp2.data(), ws.pool_idx[1].data(), rows, h2, w2, c2, dz2.data());
    relu_backward(ws.acts[5].data(), dz2.data(), dz2.size());

    auto& dcols2 = scratch(ws.f32, 3, static_cast<size_t>(rows) * h2 * w2 * 9 * c1);
    dense_back_to(m.params[2], ws.acts[4].data(), dz2.data(), rows * h2 * w2, 9 * c1, c2,
                  out.grads[2], out.grads[3], dcols2.data());
    auto& dp1 = scratch(ws.f32, 4, static_cast<size_t>(rows) * h2 * w2 * c1);
    {
        auto& acc = scratch64(ws.f64, 3, 1);
        col2im3(dcols2.data(), rows, h2, w2, c1, acc, dp1.data());
    }

    auto& dz1 = scratch(ws.f32, 5, static_cast<size_t>(rows) * h * w * c1);
    maxpool2_backward(dp1.data(), ws.pool_idx[0].data(), rows, h, w, c1, dz1.data());
    relu_backward(ws.acts[2].data(), dz1.data(), dz1.size());
    dense_back_to(m.params[0], ws.acts[1].data(), dz1.data(), rows * h * w, 9 * spec.input_c, c1,
                  out.grads[0], out.grads[1], nullptr);
    return out;
}

double batch_loss(const Model& m, const Tensor& batch, const std::vector<int>& labels) {
    const int rows = batch_rows(m.spec, batch);
    if (static_cast<int>(labels.size()) != rows)
        throw std::invalid_argument("labels count does not match batch rows");
    GradWorkspace ws;
    const size_t slot = forward_impl(m, batch, rows, ws);
    const double loss = softmax_xent(ws.acts[slot].data(), labels, rows, m.spec.classes, nullptr);
    if (!std::isfinite(loss)) throw DivergedError("non-finite loss");
    return loss;
}

Tensor input_gradient(const Model& m, const Tensor& x, int label) {
    const ModelSpec& spec = m.spec;
    if (label < 0 || label >= spec.classes) throw std::invalid_argument("label out of [0,K)");
    Tensor batch;
    if (x.rank() == 3) {
        batch = Tensor({1, x.dim(0), x.dim(1), x.dim(2)}, x.data);
    } else if (x.rank() == 1) {
        batch = Tensor({1, x.dim(0)}, x.data);
    } else {
        throw std::invalid_argument("input_gradient expects a single sample");
    }
    const int rows = batch_rows(spec, batch);
    GradWorkspace ws;
    const size_t logit_slot = forward_impl(m, batch, rows, ws);
    const int k = spec.classes;
    std::vector<float> dlogits(static_cast<size_t>(k));
    std::vector<int> labels = {label};
    softmax_xent(ws.acts[logit_slot].data(), labels, 1, k, dlogits.data());

    Tensor dx(x.shape);
    std::vector<double> acc;
    std::vector<double> dw_sink, db_sink, row;

    if (spec.kind == ModelKind::Mlp) {
        const int depth = static_cast<int>(spec.hidden.size());
        std::vector<float> dcur = dlogits;
        for (int l = depth; l >= 0; --l) {
            const Tensor& w = m.params[static_cast<size_t>(2 * l)];
            const int outn = w.dim(0);
            const int in = w.dim(1);
            if (l < depth) relu_backward(ws.acts[static_cast<size_t>(l + 1)].data(), dcur.data(), dcur.size());
            std::vector<float> dprev(static_cast<size_t>(in), 0.0f);
            dw_sink.assign(static_cast<size_t>(outn) * in, 0.0);
            db_sink.assign(static_cast<size_t>(outn), 0.0);
            dense_backward(ws.acts[static_cast<size_t>(l)].data(), w.ptr(), dcur.data(), 1, in, outn,
                           dw_sink.data(), db_sink.data(), row, dprev.data());
            dcur = std::move(dprev);
        }
        std::copy(dcur.begin(), dcur.end(), dx.data.begin());
        return dx;
    }

    const int h = spec.input_h, w = spec.input_w, c = spec.input_c;
    const int c1 = spec.channels[0], c2 = spec.channels[1];
    const int h2 = h / 2, w2 = w / 2, h4 = h / 4, w4 = w / 4;
    const int feat = h4 * w4 * c2;

    auto dense_dx = [&](const Tensor& wt, const float* xact, const float* dy, int bw_rows, int in,
                        int outn, float* dxo) {
        dw_sink.assign(static_cast<size_t>(outn) * in, 0.0);
        db_sink.assign(static_cast<size_t>(outn), 0.0);
        dense_backward(xact, wt.ptr(), dy, bw_rows, in, outn, dw_sink.data(), db_sink.data(), row, dxo);
    };

    std::vector<float> dp2(static_cast<size_t>(feat));
    dense_dx(m.params[4], ws.acts[6].data(), dlogits.data(), 1, feat, k, dp2.data());
    std::vector<float> dz2(static_cast<size_t>(h2) * w2 * c2);
    maxpool2_backward(dp2.data(), ws.pool_idx[1].data(), 1, h2, w2, c2, dz2.data());
    relu_backward(ws.acts[5].data(), dz2.data(), dz2.size());
    std::vector<float> dcols2(static_cast<size_t>(h2) * w2 * 9 * c1);
    dense_dx(m.params[2], ws.acts[4].data(), dz2.data(), h2 * w2, 9 * c1, c2, dcols2.data());
    std::vector<float> dp1(static_cast<size_t>(h2) * w2 * c1);
    col2im3(dcols2.data(), 1, h2, w2, c1, acc, dp1.data());
    std::vector<float> dz1(static_cast<size_t>(h) * w * c1);
    maxpool2_backward(dp1.data(), ws.pool_idx[0].data(), 1, h, w, c1, dz1.data());
    relu_backward(ws.acts[2].data(), dz1.data(), dz1.size());
    std::vector<float> dcols1(static_cast<size_t>(h) * w * 9 * c);
    dense_dx(m.params[0], ws.acts[1].data(), dz1.data(), h * w, 9 * c, c1, dcols1.data());
    col2im3(dcols1.data(), 1, h, w, c, acc, dx.data.data());
    return dx;
}

int predict(const Model& m, const Tensor& x) {
    Tensor batch;
    if (x.rank() == 3)
        batch = Tensor({1, x.dim(0), x.dim(1), x.dim(2)}, x.data);
    else if (x.rank() == 1)
        batch = Tensor({1, x.dim(0)}, x.data);
    else
        throw std::invalid_argument("predict expects a single sample");
    return predict_batch(m, batch)[0];
}

std::vector<int> predict_batch(const Model& m, const Tensor& batch) {
    const Tensor logits = forward(m, batch);
    const int rows = logits.dim(0);
    const int k = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(rows));
    for (int b = 0; b < rows; ++b) {
        const float* lr = logits.ptr() + static_cast<size_t>(b) * k;
        int best = 0;
        for (int i = 1; i < k; ++i)
            if (lr[i] > lr[best]) best = i;
        out[static_cast<size_t>(b)] = best;
    }
    return out;
}

}  // namespace wmlab
