#include "usub/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "usub/error.hpp"
#include "usub/parallel.hpp"

namespace usub {

namespace {

constexpr double kLnEps = 1e-5;
constexpr std::size_t kGradChunk = 8;  // examples per deterministic chunk

std::atomic<int> g_threads{0};

int default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(hw == 0 ? 1u : hw, 4u));
}

}  // namespace

void set_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

int threads() {
    int n = g_threads.load();
    if (n == 0) {
        n = default_threads();
        g_threads.store(n);
    }
    return n;
}

std::size_t chunk_count(std::size_t n_items, std::size_t chunk_size) {
    return (n_items + chunk_size - 1) / chunk_size;
}

void parallel_chunks(std::size_t n_items, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (n_items == 0) return;
    const std::size_t n_chunks = chunk_count(n_items, chunk_size);
    const int n_threads = std::min<int>(threads(), static_cast<int>(n_chunks));
    if (n_threads <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) {
            fn(c, c * chunk_size, std::min(n_items, (c + 1) * chunk_size));
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            fn(c, c * chunk_size, std::min(n_items, (c + 1) * chunk_size));
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(n_threads - 1);
    for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
}

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        context_len < 1) {
        throw InvalidInput("model config: all dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw InvalidInput("model config: d_model must be divisible by n_heads");
    }
}

const char* role_name(AttnRole r) {
    switch (r) {
        case AttnRole::Query: return "wq";
        case AttnRole::Key: return "wk";
        case AttnRole::Value: return "wv";
        case AttnRole::Output: return "wo";
    }
    return "?";
}

AttnRole role_from_name(const std::string& name) {
    for (AttnRole r : kAllRoles) {
        if (name == role_name(r)) return r;
    }
    throw InvalidInput("unknown attention role: " + name);
}

Matrix AttnParam::effective() const {
    switch (mode) {
        case Mode::Dense: return w;
        case Mode::Bottleneck: return bn->product();
        case Mode::DenseWithAdapter: return w + bn->product();
    }
    throw Error("unreachable");
}

AttnParam& LayerWeights::role(AttnRole r) {
    switch (r) {
        case AttnRole::Query: return wq;
        case AttnRole::Key: return wk;
        case AttnRole::Value: return wv;
        case AttnRole::Output: return wo;
    }
    throw Error("unreachable");
}

const AttnParam& LayerWeights::role(AttnRole r) const {
    return const_cast<LayerWeights*>(this)->role(r);
}

namespace {

std::string layer_group(int layer, const std::string& leaf) {
    return "l" + std::to_string(layer) + "." + leaf;
}

std::vector<Matrix*> trainable_tensors(AttnParam& p) {
    switch (p.mode) {
        case AttnParam::Mode::Dense: return {&p.w};
        case AttnParam::Mode::Bottleneck:
        case AttnParam::Mode::DenseWithAdapter: return {&p.bn->f, &p.bn->g};
    }
    return {};
}

}  // namespace

std::vector<ParamGroupRef> ModelWeights::param_groups() {
    std::vector<ParamGroupRef> out;
    out.push_back({"embed", {&embed}});
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
        LayerWeights& lw = layers[l];
        out.push_back({layer_group(l, "ln1"), {&lw.ln1_gain, &lw.ln1_bias}});
        for (AttnRole r : kAllRoles) {
            out.push_back({layer_group(l, role_name(r)), trainable_tensors(lw.role(r))});
        }
        out.push_back({layer_group(l, "ln2"), {&lw.ln2_gain, &lw.ln2_bias}});
        out.push_back({layer_group(l, "ff"), {&lw.ff1_w, &lw.ff1_b, &lw.ff2_w, &lw.ff2_b}});
    }
    out.push_back({"lnf", {&lnf_gain, &lnf_bias}});
    out.push_back({"head", {&head}});
    return out;
}

std::vector<std::string> ModelWeights::group_names() const {
    std::vector<std::string> names;
    names.push_back("embed");
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
        names.push_back(layer_group(l, "ln1"));
        for (AttnRole r : kAllRoles) names.push_back(layer_group(l, role_name(r)));
        names.push_back(layer_group(l, "ln2"));
        names.push_back(layer_group(l, "ff"));
    }
    names.push_back("lnf");
    names.push_back("head");
    return names;
}

FreezeMask FreezeMask::all_frozen(const ModelWeights& w) {
    FreezeMask m;
    for (const auto& name : w.group_names()) m.frozen[name] = true;
    return m;
}

FreezeMask FreezeMask::all_unfrozen(const ModelWeights& w) {
    FreezeMask m;
    for (const auto& name : w.group_names()) m.frozen[name] = false;
    return m;
}

void FreezeMask::set(const std::string& group, bool frozen_flag) { frozen[group] = frozen_flag; }

bool FreezeMask::is_frozen(const std::string& group) const {
    auto it = frozen.find(group);
    return it == frozen.end() ? true : it->second;
}

double Gradients::global_norm() const {
    double s = 0.0;
    for (const auto& [name, tensors] : groups) {
        for (const Matrix& t : tensors) {
            for (std::size_t i = 0; i < t.size(); ++i) s += t.data()[i] * t.data()[i];
        }
    }
    return std::sqrt(s);
}

void Gradients::scale(double c) {
    for (auto& [name, tensors] : groups) {
        for (Matrix& t : tensors) t *= c;
    }
}

namespace {

void fill_normal(Matrix& m, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

}  // namespace

BottleneckPair random_bottleneck(int n, int k, std::mt19937_64& rng) {
    // Variance 1/sqrt(n*k) per factor so f*g entries end up at variance
    // k/(n*k) = 1/n, matching the dense init scale.
    BottleneckPair bn;
    bn.k = k;
    bn.f = Matrix(n, k);
    bn.g = Matrix(k, n);
    const double stddev = std::pow(static_cast<double>(n) * k, -0.25);
    fill_normal(bn.f, stddev, rng);
    fill_normal(bn.g, stddev, rng);
    return bn;
}

ModelWeights init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelWeights w;
    w.config = config;
    std::mt19937_64 rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const int d = config.d_model, v = config.vocab_size, ff = config.d_ff;

    w.embed = Matrix(v, d);
    fill_normal(w.embed, stddev, rng);
    w.layers.resize(config.n_layers);
    for (LayerWeights& lw : w.layers) {
        lw.ln1_gain = Matrix(1, d);
        lw.ln1_bias = Matrix(1, d);
        for (int i = 0; i < d; ++i) lw.ln1_gain(0, i) = 1.0;
        for (AttnRole r : kAllRoles) {
            lw.role(r).mode = AttnParam::Mode::Dense;
            lw.role(r).w = Matrix(d, d);
            fill_normal(lw.role(r).w, stddev, rng);
        }
        lw.ln2_gain = Matrix(1, d);
        lw.ln2_bias = Matrix(1, d);
        for (int i = 0; i < d; ++i) lw.ln2_gain(0, i) = 1.0;
        lw.ff1_w = Matrix(d, ff);
        fill_normal(lw.ff1_w, stddev, rng);
        lw.ff1_b = Matrix(1, ff);
        lw.ff2_w = Matrix(ff, d);
        fill_normal(lw.ff2_w, stddev, rng);
        lw.ff2_b = Matrix(1, d);
    }
    w.lnf_gain = Matrix(1, d);
    w.lnf_bias = Matrix(1, d);
    for (int i = 0; i < d; ++i) w.lnf_gain(0, i) = 1.0;
    w.head = Matrix(d, v);
    fill_normal(w.head, stddev, rng);
    return w;
}

namespace {

// ---------------------------------------------------------------- forward

double gelu(double x) {
    constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c1 = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c0 * (x + c1 * x * x * x)));
}

double gelu_grad(double x) {
    constexpr double c0 = 0.7978845608028654;
    constexpr double c1 = 0.044715;
    const double u = c0 * (x + c1 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c0 * (1.0 + 3.0 * c1 * x * x);
}

// Sinusoidal encoding scaled to the embedding's init magnitude so the token
// signal is not drowned out at the start of training.
Matrix positional_encoding(int len, int d) {
    Matrix p(len, d);
    const double amp = 2.0 / std::sqrt(static_cast<double>(d));
    for (int t = 0; t < len; ++t) {
        for (int i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
            p(t, i) = amp * std::sin(t * freq);
            if (i + 1 < d) p(t, i + 1) = amp * std::cos(t * freq);
        }
    }
    return p;
}

struct EffectiveAttn {
    Matrix q, k, v, o;
};

std::vector<EffectiveAttn> effective_attn(const ModelWeights& w) {
    std::vector<EffectiveAttn> out(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        out[l].q = w.layers[l].wq.effective();
        out[l].k = w.layers[l].wk.effective();
        out[l].v = w.layers[l].wv.effective();
        out[l].o = w.layers[l].wo.effective();
    }
    return out;
}

const Matrix& eff_role(const EffectiveAttn& e, AttnRole r) {
    switch (r) {
        case AttnRole::Query: return e.q;
        case AttnRole::Key: return e.k;
        case AttnRole::Value: return e.v;
        case AttnRole::Output: return e.o;
    }
    throw Error("unreachable");
}

struct LayerTrace {
    Matrix x_in;                   // layer input, T x d
    Matrix x_hat1, a;              // LN1 normalized rows and output
    std::vector<double> inv_std1;  // per row
    Matrix q, k, v;                // T x d
    std::vector<Matrix> att;       // per head, T x T row-softmax (causal)
    Matrix headcat;                // concatenated head outputs, T x d
    Matrix x_mid;                  // after attention residual
    Matrix x_hat2, m;
    std::vector<double> inv_std2;
    Matrix f1, act;  // pre-activation and gelu output, T x ff
};

struct Trace {
    Matrix x0;
    std::vector<LayerTrace> layers;
    Matrix x_hat_f, xf;
    std::vector<double> inv_std_f;
    Matrix logits;
};

// y = gain .* (x - mean)/std + bias, per row.
void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& x_hat, Matrix& y,
                std::vector<double>& inv_std) {
    const std::size_t t_len = x.rows(), d = x.cols();
    x_hat = Matrix(t_len, d);
    y = Matrix(t_len, d);
    inv_std.assign(t_len, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* xt = x.row(t);
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xt[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xt[i] - mu) * (xt[i] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[t] = is;
        double* xh = x_hat.row(t);
        double* yt = y.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            xh[i] = (xt[i] - mu) * is;
            yt[i] = gain(0, i) * xh[i] + bias(0, i);
        }
    }
}

// Backward through layer_norm; returns dx and accumulates dgain/dbias.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x_hat,
                           const std::vector<double>& inv_std, const Matrix& gain, Matrix* dgain,
                           Matrix* dbias) {
    const std::size_t t_len = dy.rows(), d = dy.cols();
    Matrix dx(t_len, d);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* dyt = dy.row(t);
        const double* xh = x_hat.row(t);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double dxh = dyt[i] * gain(0, i);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        double* dxt = dx.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            const double dxh = dyt[i] * gain(0, i);
            dxt[i] = inv_std[t] * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
        if (dgain != nullptr) {
            for (std::size_t i = 0; i < d; ++i) {
                (*dgain)(0, i) += dyt[i] * xh[i];
                (*dbias)(0, i) += dyt[i];
            }
        }
    }
    return dx;
}

void forward_example(const ModelWeights& w, const std::vector<EffectiveAttn>& eff,
                     std::span<const int> tokens, const Matrix& pos, Trace& tr) {
    const ModelConfig& cfg = w.config;
    const std::size_t t_len = tokens.size();
    const int d = cfg.d_model, n_heads = cfg.n_heads;
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (t_len == 0) throw InvalidInput("forward: empty token sequence");
    if (t_len > static_cast<std::size_t>(cfg.context_len)) {
        throw InvalidInput("forward: sequence longer than context_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) throw InvalidInput("forward: token id out of range");
    }

    tr.x0 = Matrix(t_len, d);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double* e = w.embed.row(tokens[t]);
        const double* p = pos.row(t);
        double* x = tr.x0.row(t);
        for (int i = 0; i < d; ++i) x[i] = e[i] + p[i];
    }

    tr.layers.assign(w.layers.size(), LayerTrace{});
    Matrix x = tr.x0;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& lw = w.layers[l];
        LayerTrace& lt = tr.layers[l];
        lt.x_in = x;

        layer_norm(x, lw.ln1_gain, lw.ln1_bias, lt.x_hat1, lt.a, lt.inv_std1);
        lt.q = matmul(lt.a, eff[l].q);
        lt.k = matmul(lt.a, eff[l].k);
        lt.v = matmul(lt.a, eff[l].v);

        lt.att.assign(n_heads, Matrix());
        lt.headcat = Matrix(t_len, d);
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * dh;
            Matrix& p = lt.att[h];
            p = Matrix(t_len, t_len);
            for (std::size_t t = 0; t < t_len; ++t) {
                double mx = -1e300;
                for (std::size_t s = 0; s <= t; ++s) {
                    double sc = 0.0;
                    const double* qt = lt.q.row(t) + off;
                    const double* ks = lt.k.row(s) + off;
                    for (int i = 0; i < dh; ++i) sc += qt[i] * ks[i];
                    sc *= scale;
                    p(t, s) = sc;
                    mx = std::max(mx, sc);
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    p(t, s) = std::exp(p(t, s) - mx);
                    z += p(t, s);
                }
                for (std::size_t s = 0; s <= t; ++s) p(t, s) /= z;
                double* out = lt.headcat.row(t) + off;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double pts = p(t, s);
                    const double* vs = lt.v.row(s) + off;
                    for (int i = 0; i < dh; ++i) out[i] += pts * vs[i];
                }
            }
        }
        const Matrix attn_out = matmul(lt.headcat, eff[l].o);
        lt.x_mid = x + attn_out;

        layer_norm(lt.x_mid, lw.ln2_gain, lw.ln2_bias, lt.x_hat2, lt.m, lt.inv_std2);
        lt.f1 = matmul(lt.m, lw.ff1_w);
        for (std::size_t t = 0; t < t_len; ++t) {
            double* row = lt.f1.row(t);
            for (int i = 0; i < cfg.d_ff; ++i) row[i] += lw.ff1_b(0, i);
        }
        lt.act = lt.f1;
        for (std::size_t i = 0; i < lt.act.size(); ++i) lt.act.data()[i] = gelu(lt.act.data()[i]);
        Matrix f2 = matmul(lt.act, lw.ff2_w);
        for (std::size_t t = 0; t < t_len; ++t) {
            double* row = f2.row(t);
            for (int i = 0; i < d; ++i) row[i] += lw.ff2_b(0, i);
        }
        x = lt.x_mid + f2;
    }

    layer_norm(x, w.lnf_gain, w.lnf_bias, tr.x_hat_f, tr.xf, tr.inv_std_f);
    tr.logits = matmul(tr.xf, w.head);
}

// ---------------------------------------------------------------- backward

struct RawLayerGrads {
    Matrix ln1_g, ln1_b;
    std::array<Matrix, 4> weff;  // q, k, v, o
    Matrix ln2_g, ln2_b;
    Matrix ff1_w, ff1_b, ff2_w, ff2_b;
};

struct RawGrads {
    Matrix embed;
    std::vector<RawLayerGrads> layers;
    Matrix lnf_g, lnf_b;
    Matrix head;
};

struct GradFlags {
    bool embed = false, head = false, lnf = false;
    struct L {
        bool ln1 = false, ln2 = false, ff = false;
        std::array<bool, 4> roles{};
    };
    std::vector<L> layers;
};

GradFlags grad_flags(const ModelWeights& w, const FreezeMask& mask) {
    GradFlags f;
    f.embed = !mask.is_frozen("embed");
    f.head = !mask.is_frozen("head");
    f.lnf = !mask.is_frozen("lnf");
    f.layers.resize(w.layers.size());
    for (int l = 0; l < static_cast<int>(w.layers.size()); ++l) {
        f.layers[l].ln1 = !mask.is_frozen(layer_group(l, "ln1"));
        f.layers[l].ln2 = !mask.is_frozen(layer_group(l, "ln2"));
        f.layers[l].ff = !mask.is_frozen(layer_group(l, "ff"));
        for (int r = 0; r < 4; ++r) {
            f.layers[l].roles[r] = !mask.is_frozen(layer_group(l, role_name(kAllRoles[r])));
        }
    }
    return f;
}

RawGrads make_raw_grads(const ModelWeights& w, const GradFlags& fl) {
    const int d = w.config.d_model, ff = w.config.d_ff, v = w.config.vocab_size;
    RawGrads g;
    if (fl.embed) g.embed = Matrix(v, d);
    if (fl.head) g.head = Matrix(d, v);
    if (fl.lnf) {
        g.lnf_g = Matrix(1, d);
        g.lnf_b = Matrix(1, d);
    }
    g.layers.resize(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        RawLayerGrads& lg = g.layers[l];
        if (fl.layers[l].ln1) {
            lg.ln1_g = Matrix(1, d);
            lg.ln1_b = Matrix(1, d);
        }
        if (fl.layers[l].ln2) {
            lg.ln2_g = Matrix(1, d);
            lg.ln2_b = Matrix(1, d);
        }
        if (fl.layers[l].ff) {
            lg.ff1_w = Matrix(d, ff);
            lg.ff1_b = Matrix(1, ff);
            lg.ff2_w = Matrix(ff, d);
            lg.ff2_b = Matrix(1, d);
        }
        for (int r = 0; r < 4; ++r) {
            if (fl.layers[l].roles[r]) lg.weff[r] = Matrix(d, d);
        }
    }
    return g;
}

void add_into(Matrix& dst, const Matrix& src) {
    if (src.empty()) return;
    if (dst.empty()) {
        dst = src;
    } else {
        dst += src;
    }
}

void raw_grads_add(RawGrads& dst, const RawGrads& src) {
    add_into(dst.embed, src.embed);
    add_into(dst.head, src.head);
    add_into(dst.lnf_g, src.lnf_g);
    add_into(dst.lnf_b, src.lnf_b);
    if (dst.layers.size() < src.layers.size()) dst.layers.resize(src.layers.size());
    for (std::size_t l = 0; l < src.layers.size(); ++l) {
        add_into(dst.layers[l].ln1_g, src.layers[l].ln1_g);
        add_into(dst.layers[l].ln1_b, src.layers[l].ln1_b);
        add_into(dst.layers[l].ln2_g, src.layers[l].ln2_g);
        add_into(dst.layers[l].ln2_b, src.layers[l].ln2_b);
        add_into(dst.layers[l].ff1_w, src.layers[l].ff1_w);
        add_into(dst.layers[l].ff1_b, src.layers[l].ff1_b);
        add_into(dst.layers[l].ff2_w, src.layers[l].ff2_w);
        add_into(dst.layers[l].ff2_b, src.layers[l].ff2_b);
        for (int r = 0; r < 4; ++r) add_into(dst.layers[l].weff[r], src.layers[l].weff[r]);
    }
}

// Backward for one example. dlogits carries the loss scaling already.
void backward_example(const ModelWeights& w, const std::vector<EffectiveAttn>& eff,
                      std::span<const int> tokens, const Trace& tr, const Matrix& dlogits,
                      const GradFlags& fl, RawGrads& g) {
    const ModelConfig& cfg = w.config;
    const std::size_t t_len = tokens.size();
    const int d = cfg.d_model, n_heads = cfg.n_heads, dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (fl.head) g.head += matmul_tn(tr.xf, dlogits);
    Matrix dxf = matmul_nt(dlogits, w.head);
    Matrix dx = layer_norm_backward(dxf, tr.x_hat_f, tr.inv_std_f, w.lnf_gain,
                                    fl.lnf ? &g.lnf_g : nullptr, fl.lnf ? &g.lnf_b : nullptr);

    for (int l = static_cast<int>(w.layers.size()) - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const LayerTrace& lt = tr.layers[l];
        RawLayerGrads& lg = g.layers[l];
        const GradFlags::L& lf = fl.layers[l];

        // Feed-forward branch: x_out = x_mid + (gelu(m W1 + b1) W2 + b2).
        const Matrix& df2 = dx;
        if (lf.ff) {
            lg.ff2_w += matmul_tn(lt.act, df2);
            for (std::size_t t = 0; t < t_len; ++t) {
                const double* row = df2.row(t);
                for (int i = 0; i < d; ++i) lg.ff2_b(0, i) += row[i];
            }
        }
        Matrix dact = matmul_nt(df2, lw.ff2_w);
        for (std::size_t i = 0; i < dact.size(); ++i) {
            dact.data()[i] *= gelu_grad(lt.f1.data()[i]);
        }
        if (lf.ff) {
            lg.ff1_w += matmul_tn(lt.m, dact);
            for (std::size_t t = 0; t < t_len; ++t) {
                const double* row = dact.row(t);
                for (int i = 0; i < cfg.d_ff; ++i) lg.ff1_b(0, i) += row[i];
            }
        }
        Matrix dm = matmul_nt(dact, lw.ff1_w);
        Matrix dx_mid = layer_norm_backward(dm, lt.x_hat2, lt.inv_std2, lw.ln2_gain,
                                            lf.ln2 ? &lg.ln2_g : nullptr,
                                            lf.ln2 ? &lg.ln2_b : nullptr);
        dx_mid += dx;  // residual path

        // Attention branch: x_mid = x_in + headcat W_o.
        const Matrix& dattn_out = dx_mid;
        if (lf.roles[3]) lg.weff[3] += matmul_tn(lt.headcat, dattn_out);
        Matrix dheadcat = matmul_nt(dattn_out, eff[l].o);

        Matrix dq(t_len, d), dk(t_len, d), dv(t_len, d);
        std::vector<double> dp(t_len), ds(t_len);
        for (int h = 0; h < n_heads; ++h) {
            const int off = h * dh;
            const Matrix& p = lt.att[h];
            for (std::size_t t = 0; t < t_len; ++t) {
                const double* dhc = dheadcat.row(t) + off;
                double dot_pp = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* vs = lt.v.row(s) + off;
                    double acc = 0.0;
                    for (int i = 0; i < dh; ++i) acc += dhc[i] * vs[i];
                    dp[s] = acc;
                    dot_pp += acc * p(t, s);
                    double* dvs = dv.row(s) + off;
                    const double pts = p(t, s);
                    for (int i = 0; i < dh; ++i) dvs[i] += pts * dhc[i];
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    ds[s] = p(t, s) * (dp[s] - dot_pp) * scale;
                }
                double* dqt = dq.row(t) + off;
                const double* qt = lt.q.row(t) + off;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double dss = ds[s];
                    const double* ks = lt.k.row(s) + off;
                    double* dks = dk.row(s) + off;
                    for (int i = 0; i < dh; ++i) {
                        dqt[i] += dss * ks[i];
                        dks[i] += dss * qt[i];
                    }
                }
            }
        }

        if (lf.roles[0]) lg.weff[0] += matmul_tn(lt.a, dq);
        if (lf.roles[1]) lg.weff[1] += matmul_tn(lt.a, dk);
        if (lf.roles[2]) lg.weff[2] += matmul_tn(lt.a, dv);
        Matrix da = matmul_nt(dq, eff[l].q);
        da += matmul_nt(dk, eff[l].k);
        da += matmul_nt(dv, eff[l].v);

        Matrix dx_in = layer_norm_backward(da, lt.x_hat1, lt.inv_std1, lw.ln1_gain,
                                           lf.ln1 ? &lg.ln1_g : nullptr,
                                           lf.ln1 ? &lg.ln1_b : nullptr);
        dx_in += dx_mid;  // residual path
        dx = std::move(dx_in);
    }

    if (fl.embed) {
        for (std::size_t t = 0; t < t_len; ++t) {
            double* e = g.embed.row(tokens[t]);
            const double* dxt = dx.row(t);
            for (int i = 0; i < d; ++i) e[i] += dxt[i];
        }
    }
}

double example_nll_and_dlogits(const Trace& tr, const Example& ex, double inv_count,
                               Matrix* dlogits) {
    const std::size_t px = ex.x.size();
    const std::size_t t_len = px + ex.y.size();
    const std::size_t vocab = tr.logits.cols();
    if (dlogits != nullptr) *dlogits = Matrix(t_len, vocab);
    double nll = 0.0;
    for (std::size_t j = 0; j < ex.y.size(); ++j) {
        const std::size_t pos = px - 1 + j;  // position predicting y[j]
        const int target = ex.y[j];
        const double* lg = tr.logits.row(pos);
        double mx = lg[0];
        for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, lg[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < vocab; ++i) z += std::exp(lg[i] - mx);
        nll += (mx + std::log(z)) - lg[target];
        if (dlogits != nullptr) {
            double* dl = dlogits->row(pos);
            for (std::size_t i = 0; i < vocab; ++i) {
                dl[i] = std::exp(lg[i] - mx) / z * inv_count;
            }
            dl[target] -= inv_count;
        }
    }
    return nll;
}

std::vector<int> concat_tokens(const Example& ex) {
    std::vector<int> seq(ex.x);
    seq.insert(seq.end(), ex.y.begin(), ex.y.end());
    return seq;
}

void validate_batch(const ModelWeights& w, std::span<const Example> batch) {
    if (batch.empty()) throw InvalidInput("loss: empty batch");
    for (const Example& ex : batch) {
        if (ex.x.empty() || ex.y.empty()) throw InvalidInput("loss: example with empty x or y");
        if (ex.x.size() + ex.y.size() > static_cast<std::size_t>(w.config.context_len)) {
            throw InvalidInput("loss: example longer than context_len");
        }
    }
}

}  // namespace

Matrix forward(const ModelWeights& weights, std::span<const int> tokens) {
    const auto eff = effective_attn(weights);
    const Matrix pos = positional_encoding(static_cast<int>(tokens.size()), weights.config.d_model);
    Trace tr;
    forward_example(weights, eff, tokens, pos, tr);
    return tr.logits;
}

double batch_loss(const ModelWeights& weights, std::span<const Example> batch) {
    validate_batch(weights, batch);
    const auto eff = effective_attn(weights);
    const Matrix pos = positional_encoding(weights.config.context_len, weights.config.d_model);

    std::size_t total = 0;
    for (const Example& ex : batch) total += ex.y.size();

    const std::size_t n_chunks = chunk_count(batch.size(), kGradChunk);
    std::vector<double> chunk_nll(n_chunks, 0.0);
    parallel_chunks(batch.size(), kGradChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
        Trace tr;
        double nll = 0.0;
        for (std::size_t i = b; i < e; ++i) {
            const std::vector<int> seq = concat_tokens(batch[i]);
            forward_example(weights, eff, seq, pos, tr);
            nll += example_nll_and_dlogits(tr, batch[i], 0.0, nullptr);
        }
        chunk_nll[c] = nll;
    });
    double nll = 0.0;
    for (double v : chunk_nll) nll += v;
    return nll / static_cast<double>(total);
}

LossAndGrads loss_and_grads(const ModelWeights& weights, std::span<const Example> batch,
                            const FreezeMask& mask) {
    validate_batch(weights, batch);
    const auto eff = effective_attn(weights);
    const Matrix pos = positional_encoding(weights.config.context_len, weights.config.d_model);
    const GradFlags fl = grad_flags(weights, mask);

    std::size_t total = 0;
    for (const Example& ex : batch) total += ex.y.size();
    const double inv_count = 1.0 / static_cast<double>(total);

    const std::size_t n_chunks = chunk_count(batch.size(), kGradChunk);
    std::vector<double> chunk_nll(n_chunks, 0.0);
    std::vector<RawGrads> chunk_grads(n_chunks);
    parallel_chunks(batch.size(), kGradChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
        RawGrads g = make_raw_grads(weights, fl);
        Trace tr;
        Matrix dlogits;
        double nll = 0.0;
        for (std::size_t i = b; i < e; ++i) {
            const std::vector<int> seq = concat_tokens(batch[i]);
            forward_example(weights, eff, seq, pos, tr);
            nll += example_nll_and_dlogits(tr, batch[i], inv_count, &dlogits);
            backward_example(weights, eff, seq, tr, dlogits, fl, g);
        }
        chunk_nll[c] = nll;
        chunk_grads[c] = std::move(g);
    });

    RawGrads raw = std::move(chunk_grads[0]);
    double nll = chunk_nll[0];
    for (std::size_t c = 1; c < n_chunks; ++c) {
        raw_grads_add(raw, chunk_grads[c]);
        nll += chunk_nll[c];
    }

    LossAndGrads out;
    out.loss = nll * inv_count;

    // Map effective-weight gradients onto the trainable parameterization.
    if (fl.embed) out.grads.groups["embed"] = {std::move(raw.embed)};
    for (int l = 0; l < static_cast<int>(weights.layers.size()); ++l) {
        const GradFlags::L& lf = fl.layers[l];
        RawLayerGrads& lg = raw.layers[l];
        if (lf.ln1) {
            out.grads.groups[layer_group(l, "ln1")] = {std::move(lg.ln1_g), std::move(lg.ln1_b)};
        }
        for (int r = 0; r < 4; ++r) {
            if (!lf.roles[r]) continue;
            const AttnParam& p = weights.layers[l].role(kAllRoles[r]);
            const std::string name = layer_group(l, role_name(kAllRoles[r]));
            if (p.mode == AttnParam::Mode::Dense) {
                out.grads.groups[name] = {std::move(lg.weff[r])};
            } else {
                // d(f g) chain: df = dW g^T, dg = f^T dW.
                out.grads.groups[name] = {matmul_nt(lg.weff[r], p.bn->g),
                                          matmul_tn(p.bn->f, lg.weff[r])};
            }
        }
        if (lf.ln2) {
            out.grads.groups[layer_group(l, "ln2")] = {std::move(lg.ln2_g), std::move(lg.ln2_b)};
        }
        if (lf.ff) {
            out.grads.groups[layer_group(l, "ff")] = {std::move(lg.ff1_w), std::move(lg.ff1_b),
                                                      std::move(lg.ff2_w), std::move(lg.ff2_b)};
        }
    }
    if (fl.lnf) out.grads.groups["lnf"] = {std::move(raw.lnf_g), std::move(raw.lnf_b)};
    if (fl.head) out.grads.groups["head"] = {std::move(raw.head)};

    if (!std::isfinite(out.loss)) {
        throw TrainingError("loss is not finite", "batch loss=" + std::to_string(out.loss));
    }
    return out;
}

ModelWeights apply_delta(const ModelWeights& weights, int layer, AttnRole role,
                         const Matrix& delta, int sign) {
    if (layer < 0 || layer >= static_cast<int>(weights.layers.size())) {
        throw InvalidInput("apply_delta: layer index out of range");
    }
    if (sign != 1 && sign != -1) throw InvalidInput("apply_delta: sign must be +1 or -1");
    ModelWeights out = weights;
    AttnParam& p = out.layers[layer].role(role);
    if (p.mode != AttnParam::Mode::Dense) {
        throw InvalidInput("apply_delta: target projection is not a dense matrix");
    }
    if (!p.w.same_shape(delta)) throw DimensionError("apply_delta: delta shape mismatch");
    if (sign > 0) {
        p.w += delta;
    } else {
        p.w -= delta;
    }
    return out;
}

std::vector<int> greedy_decode(const ModelWeights& weights, std::span<const int> prompt,
                               std::size_t n_tokens) {
    if (prompt.size() + n_tokens > static_cast<std::size_t>(weights.config.context_len)) {
        throw InvalidInput("greedy_decode: prompt plus continuation exceeds context_len");
    }
    const auto eff = effective_attn(weights);
    const Matrix pos = positional_encoding(weights.config.context_len, weights.config.d_model);
    std::vector<int> ctx(prompt.begin(), prompt.end());
    std::vector<int> out;
    Trace tr;
    for (std::size_t step = 0; step < n_tokens; ++step) {
        forward_example(weights, eff, ctx, pos, tr);
        const double* lg = tr.logits.row(ctx.size() - 1);
        int best = 0;
        for (int i = 1; i < weights.config.vocab_size; ++i) {
            if (lg[i] > lg[best]) best = i;  // ties keep the lowest id
        }
        out.push_back(best);
        ctx.push_back(best);
    }
    return out;
}

void sgd_step(ModelWeights& weights, const Gradients& grads, double step_size) {
    auto groups = weights.param_groups();
    std::map<std::string, ParamGroupRef*> by_name;
    for (auto& g : groups) by_name[g.name] = &g;
    for (const auto& [name, tensors] : grads.groups) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw InvalidInput("sgd_step: unknown group " + name);
        ParamGroupRef* ref = it->second;
        if (ref->tensors.size() != tensors.size()) {
            throw DimensionError("sgd_step: tensor count mismatch for " + name);
        }
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            Matrix& w = *ref->tensors[i];
            const Matrix& g = tensors[i];
            if (!w.same_shape(g)) throw DimensionError("sgd_step: shape mismatch in " + name);
            for (std::size_t j = 0; j < w.size(); ++j) {
                w.data()[j] -= step_size * g.data()[j];
            }
        }
    }
}

}  // namespace usub
