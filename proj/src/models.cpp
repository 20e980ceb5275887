#include "wqtrust/models.hpp"

#include "wqtrust/error.hpp"
#include "wqtrust/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

namespace wqt::models {

namespace {

using nd::Shape;

constexpr double kBnMomentum = 0.1;
constexpr double kBnEps = 1e-5;
constexpr std::size_t kDecoderBlocks = 1;

/// x[..., in] * W[in x out] + b[out] for inputs of any rank >= 2.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& s = x.shape();
    const std::size_t in = s.back();
    const std::size_t rows = x.numel() / in;
    Tensor flat = s.size() == 2 ? x : nd::reshape(x, {rows, in});
    Tensor y = nd::add_bias(nd::matmul(flat, w), b);
    if (s.size() == 2) return y;
    Shape out = s;
    out.back() = w.dim(1);
    return nd::reshape(y, out);
}

Tensor maybe_dropout(const Tensor& x, double p, const ForwardOptions& opts) {
    if (p == 0.0) return x;
    if (!opts.rng) throw ContractError("dropout requested without a random stream");
    return nd::dropout(x, p, *opts.rng);
}

/// Sinusoidal position table [n x width] for positions first..first+n-1.
std::vector<double> positional_table(std::size_t first, std::size_t n, std::size_t width) {
    std::vector<double> pe(n * width);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t i = 0; i < width; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
            const double a = static_cast<double>(first + p) * freq;
            pe[p * width + i] = i % 2 == 0 ? std::sin(a) : std::cos(a);
        }
    return pe;
}

void check_input(const ModelSpec& spec, const ModelInput& in) {
    const std::size_t rows = window_rows(spec);
    if (!in.dynamic.defined() || in.dynamic.rank() != 3 || in.dynamic.dim(1) != rows ||
        in.dynamic.dim(2) != spec.n_dynamic)
        throw DimensionError("dynamic input must be [B x " + std::to_string(rows) + " x " +
                             std::to_string(spec.n_dynamic) + "]");
    const std::size_t b = in.dynamic.dim(0);
    if (b == 0) throw DimensionError("empty batch");
    if (!in.statics.defined() || in.statics.rank() != 2 || in.statics.dim(0) != b ||
        in.statics.dim(1) != spec.n_static)
        throw DimensionError("static input must be [B x " + std::to_string(spec.n_static) + "]");
    if (spec.family == Family::Operator &&
        (!in.coords.defined() || in.coords.rank() != 2 || in.coords.dim(0) != b || in.coords.dim(1) != 2))
        throw DimensionError("coordinate input must be [B x 2]");
}

class Init {
public:
    Init(Model& m, std::uint64_t seed) : params_(m.parameters()), buffers_(m.buffers()), rng_(seed) {}

    void uniform(const std::string& name, Shape shape, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> v(nd::numel_of(shape));
        for (auto& x : v) x = u(rng_);
        params_.emplace_back(name, Tensor(std::move(shape), std::move(v), true));
    }
    void constant(const std::string& name, Shape shape, double value) {
        params_.emplace_back(name, Tensor::full(std::move(shape), value, true));
    }
    void linear(const std::string& name, std::size_t in, std::size_t out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
        uniform(name + ".weight", {in, out}, bound);
        uniform(name + ".bias", {out}, bound);
    }
    void norm(const std::string& name, std::size_t width) {
        constant(name + ".gamma", {width}, 1.0);
        constant(name + ".beta", {width}, 0.0);
    }
    void batch_norm(const std::string& name, std::size_t width) {
        norm(name, width);
        buffers_.emplace_back(name + ".running_mean", std::vector<double>(width, 0.0));
        buffers_.emplace_back(name + ".running_var", std::vector<double>(width, 1.0));
    }

private:
    std::vector<std::pair<std::string, Tensor>>& params_;
    std::vector<std::pair<std::string, std::vector<double>>>& buffers_;
    std::mt19937_64 rng_;
};

} // namespace

std::string_view to_string(Family f) {
    switch (f) {
    case Family::Recurrent: return "recurrent";
    case Family::Operator: return "operator";
    case Family::Attention: return "attention";
    }
    return "?";
}

Family parse_family(std::string_view s) {
    if (s == "recurrent") return Family::Recurrent;
    if (s == "operator") return Family::Operator;
    if (s == "attention") return Family::Attention;
    throw ConfigError("unknown model family '" + std::string(s) + "'");
}

ModelSpec default_spec(Family family, std::size_t n_dynamic, std::size_t n_static, std::size_t n_targets) {
    ModelSpec s;
    s.family = family;
    s.layers = family == Family::Operator ? 7 : family == Family::Attention ? 3 : 2;
    s.n_dynamic = n_dynamic;
    s.n_static = n_static;
    s.n_targets = n_targets;
    return s;
}

void validate(const ModelSpec& spec) {
    if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (spec.hidden < 1) throw ConfigError("hidden width must be at least 1");
    if (spec.seq_len < 1) throw ConfigError("sequence length must be at least 1");
    if (spec.layers < 1) throw ConfigError("layer count must be at least 1");
    if (spec.n_targets < 1) throw ConfigError("at least one target is required");
    if (spec.n_dynamic + spec.n_static < 1) throw ConfigError("model has no inputs");
    if (spec.family == Family::Attention) {
        if (spec.heads < 1 || spec.hidden % spec.heads != 0)
            throw ConfigError("attention hidden width " + std::to_string(spec.hidden) +
                              " is not divisible by " + std::to_string(spec.heads) + " heads");
        if (spec.decoder_window > spec.seq_len) throw ConfigError("decoder window exceeds sequence length");
        if (spec.ff_dim < 1) throw ConfigError("feed-forward width must be at least 1");
    }
    if (spec.family == Family::Operator)
        for (auto w : spec.head_widths)
            if (w < 1) throw ConfigError("operator head widths must be positive");
}

std::size_t window_rows(const ModelSpec& spec) {
    switch (spec.family) {
    case Family::Recurrent: return spec.seq_len;
    case Family::Operator: return 1;
    case Family::Attention: return spec.seq_len + 1;
    }
    return 0;
}

std::size_t lstm_parameter_count(std::size_t inputs, std::size_t hidden, std::size_t layers,
                                 std::size_t outputs) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t in = l == 0 ? inputs : hidden;
        n += 4 * (hidden * (in + hidden) + hidden);
    }
    return n + hidden * outputs + outputs;
}

// ------------------------------------------------------------------ model

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
    validate(spec);
    Model m;
    m.spec_ = spec;
    Init init(m, seed);
    const std::size_t h = spec.hidden;
    const std::size_t inputs = spec.n_dynamic + spec.n_static;
    switch (spec.family) {
    case Family::Recurrent: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(h));
        for (std::size_t l = 0; l < spec.layers; ++l) {
            const std::string p = "lstm" + std::to_string(l);
            init.uniform(p + ".w_ih", {l == 0 ? inputs : h, 4 * h}, bound);
            init.uniform(p + ".w_hh", {h, 4 * h}, bound);
            init.uniform(p + ".bias", {4 * h}, bound);
            // Forget-gate bias starts at 1 so early gradients flow through time.
            auto bias = m.params_.back().second.mutable_data();
            for (std::size_t j = h; j < 2 * h; ++j) bias[j] += 1.0;
        }
        init.linear("head", h, spec.n_targets);
        break;
    }
    case Family::Operator: {
        for (std::size_t k = 0; k < spec.layers; ++k) {
            const std::string b = "branch" + std::to_string(k);
            init.linear(b, k == 0 ? inputs : h, h);
            init.batch_norm(b + ".bn", h);
        }
        for (std::size_t k = 0; k < spec.layers; ++k) {
            const std::string t = "trunk" + std::to_string(k);
            init.linear(t, k == 0 ? 2 : h, h);
            init.batch_norm(t + ".bn", h);
        }
        std::size_t prev = h;
        for (std::size_t k = 0; k < spec.head_widths.size(); ++k) {
            init.linear("d" + std::to_string(k), prev, spec.head_widths[k]);
            prev = spec.head_widths[k];
        }
        init.linear("out", prev, spec.n_targets);
        break;
    }
    case Family::Attention: {
        init.linear("embed", inputs, h);
        const auto block = [&](const std::string& p) {
            init.linear(p + ".wq", h, h);
            init.linear(p + ".wk", h, h);
            init.linear(p + ".wv", h, h);
            init.linear(p + ".wo", h, h);
            init.norm(p + ".ln1", h);
            init.linear(p + ".ff1", h, spec.ff_dim);
            init.linear(p + ".ff2", spec.ff_dim, h);
            init.norm(p + ".ln2", h);
        };
        for (std::size_t k = 0; k < spec.layers; ++k) {
            block("enc" + std::to_string(k));
            if (k + 1 < spec.layers) init.linear("distill" + std::to_string(k), 3 * h, h);
        }
        init.norm("enc_norm", h);
        for (std::size_t k = 0; k < kDecoderBlocks; ++k) block("dec" + std::to_string(k));
        init.norm("dec_norm", h);
        init.linear("out1", h, h);
        init.linear("out2", h, spec.n_targets);
        break;
    }
    }
    return m;
}

Model Model::clone() const {
    Model m;
    m.spec_ = spec_;
    for (const auto& [name, t] : params_) m.params_.emplace_back(name, t.detach(true));
    m.buffers_ = buffers_;
    return m;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

const Tensor& Model::param(std::string_view name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw ContractError("model has no parameter '" + std::string(name) + "'");
}

Tensor& Model::parameter(std::string_view name) { return const_cast<Tensor&>(param(name)); }

std::vector<double>& Model::buffer(std::string_view name) {
    for (auto& [n, v] : buffers_)
        if (n == name) return v;
    throw ContractError("model has no buffer '" + std::string(name) + "'");
}


Tensor Model::forward(const ModelInput& in, const ForwardOptions& opts) {
    check_input(spec_, in);
    const double p = opts.dropout.value_or(opts.training ? spec_.dropout : 0.0);
    if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout probability must lie in [0, 1)");
    switch (spec_.family) {
    case Family::Recurrent: return forward_recurrent(in, opts, p);
    case Family::Operator: return forward_operator(in, opts, p);
    case Family::Attention: return forward_attention(in, opts, p);
    }
    return {};
}

Tensor Model::forward_recurrent(const ModelInput& in, const ForwardOptions& opts, double p) {
    const std::size_t B = in.dynamic.dim(0), W = spec_.seq_len, F = spec_.n_dynamic, S = spec_.n_static;
    const std::size_t h = spec_.hidden;

    // Time-major so each step is a contiguous row block.
    Tensor x = nd::reshape(nd::permute(in.dynamic, {1, 0, 2}), {W * B, F});
    Tensor last;
    for (std::size_t l = 0; l < spec_.layers; ++l) {
        const std::string pre = "lstm" + std::to_string(l);
        const Tensor& w_ih = param(pre + ".w_ih");
        const Tensor& w_hh = param(pre + ".w_hh");
        const Tensor& bias = param(pre + ".bias");
        Tensor xproj, step_bias;
        if (l == 0) {
            // Statics are the same at every step: project them once.
            xproj = nd::matmul(x, F == w_ih.dim(0) ? w_ih : nd::slice(w_ih, 0, 0, F));
            step_bias = S > 0 ? nd::add_bias(nd::matmul(in.statics, nd::slice(w_ih, 0, F, F + S)), bias)
                              : nd::add_bias(Tensor::zeros({B, 4 * h}), bias);
        } else {
            xproj = nd::matmul(x, w_ih);
            step_bias = nd::add_bias(Tensor::zeros({B, 4 * h}), bias);
        }
        Tensor hs, cs;
        std::vector<Tensor> outputs;
        const bool last_layer = l + 1 == spec_.layers;
        if (!last_layer) outputs.reserve(W);
        for (std::size_t t = 0; t < W; ++t) {
            Tensor gates = nd::add(nd::slice(xproj, 0, t * B, (t + 1) * B), step_bias);
            if (t > 0) gates = nd::add(gates, nd::matmul(hs, w_hh));
            Tensor ig = nd::sigmoid(nd::slice(gates, 1, 0, h));
            Tensor fg = nd::sigmoid(nd::slice(gates, 1, h, 2 * h));
            Tensor gg = nd::tanh(nd::slice(gates, 1, 2 * h, 3 * h));
            Tensor og = nd::sigmoid(nd::slice(gates, 1, 3 * h, 4 * h));
            cs = t > 0 ? nd::add(nd::mul(fg, cs), nd::mul(ig, gg)) : nd::mul(ig, gg);
            hs = nd::mul(og, nd::tanh(cs));
            if (!last_layer) outputs.push_back(hs);
        }
        if (last_layer) {
            last = hs;
        } else {
            x = maybe_dropout(nd::concat(outputs, 0), p, opts);
        }
    }
    last = maybe_dropout(last, p, opts);
    return linear(last, param("head.weight"), param("head.bias"));
}

Tensor Model::forward_operator(const ModelInput& in, const ForwardOptions& opts, double p) {
    const std::size_t B = in.dynamic.dim(0);
    const auto block = [&](Tensor x, const std::string& name) {
        x = linear(x, param(name + ".weight"), param(name + ".bias"));
        const Tensor& gamma = param(name + ".bn.gamma");
        const Tensor& beta = param(name + ".bn.beta");
        auto& rm = buffer(name + ".bn.running_mean");
        auto& rv = buffer(name + ".bn.running_var");
        if (opts.training) {
            nd::BatchStats st;
            x = nd::batch_norm(x, gamma, beta, kBnEps, &st);
            for (std::size_t j = 0; j < rm.size(); ++j) {
                rm[j] = (1.0 - kBnMomentum) * rm[j] + kBnMomentum * st.mean[j];
                rv[j] = (1.0 - kBnMomentum) * rv[j] + kBnMomentum * st.var_unbiased[j];
            }
        } else {
            std::vector<double> neg_mean(rm.size()), inv_std(rv.size());
            for (std::size_t j = 0; j < rm.size(); ++j) {
                neg_mean[j] = -rm[j];
                inv_std[j] = 1.0 / std::sqrt(rv[j] + kBnEps);
            }
            x = nd::add_bias(x, Tensor::vector(std::move(neg_mean)));
            x = nd::mul_cols(x, nd::mul(gamma, Tensor::vector(std::move(inv_std))));
            x = nd::add_bias(x, beta);
        }
        return maybe_dropout(nd::leaky_relu(x), p, opts);
    };

    Tensor branch = nd::reshape(in.dynamic, {B, spec_.n_dynamic});
    if (spec_.n_static > 0) branch = nd::concat({branch, in.statics}, 1);
    Tensor trunk = in.coords;
    for (std::size_t k = 0; k < spec_.layers; ++k) branch = block(branch, "branch" + std::to_string(k));
    for (std::size_t k = 0; k < spec_.layers; ++k) trunk = block(trunk, "trunk" + std::to_string(k));
    Tensor z = nd::mul(branch, trunk);
    for (std::size_t k = 0; k < spec_.head_widths.size(); ++k) {
        const std::string name = "d" + std::to_string(k);
        z = nd::leaky_relu(linear(z, param(name + ".weight"), param(name + ".bias")));
    }
    return linear(z, param("out.weight"), param("out.bias"));
}

Tensor Model::forward_attention(const ModelInput& in, const ForwardOptions& opts, double p) {
    const std::size_t B = in.dynamic.dim(0), L = spec_.seq_len, Wd = spec_.decoder_window;
    const std::size_t h = spec_.hidden, H = spec_.heads, dh = h / H;

    const auto embed = [&](const Tensor& rows, std::size_t first_pos) {
        const std::size_t T = rows.dim(1);
        Tensor tok = rows;
        if (spec_.n_static > 0) {
            // Statics repeated on every token.
            Tensor st = nd::reshape(in.statics, {B, 1, spec_.n_static});
            st = nd::gather(st, 1, std::vector<std::int64_t>(T, 0));
            tok = nd::concat({tok, st}, 2);
        }
        Tensor e = linear(tok, param("embed.weight"), param("embed.bias"));
        const auto pe = positional_table(first_pos, T, h);
        std::vector<double> full(B * T * h);
        for (std::size_t b = 0; b < B; ++b) std::copy(pe.begin(), pe.end(), full.begin() + b * T * h);
        return nd::add(e, Tensor({B, T, h}, std::move(full)));
    };

    const auto attention = [&](const Tensor& x, const std::string& pre) {
        const std::size_t T = x.dim(1);
        Tensor q = linear(x, param(pre + ".wq.weight"), param(pre + ".wq.bias"));
        Tensor k = linear(x, param(pre + ".wk.weight"), param(pre + ".wk.bias"));
        Tensor v = linear(x, param(pre + ".wv.weight"), param(pre + ".wv.bias"));
        q = nd::reshape(nd::permute(nd::reshape(q, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
        k = nd::reshape(nd::permute(nd::reshape(k, {B, T, H, dh}), {0, 2, 3, 1}), {B * H, dh, T});
        v = nd::reshape(nd::permute(nd::reshape(v, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
        Tensor a = nd::softmax_lastdim(nd::scale(nd::bmm(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
        if (opts.attention_weights) opts.attention_weights->push_back(a);
        Tensor ctx = nd::bmm(a, v);
        ctx = nd::reshape(nd::permute(nd::reshape(ctx, {B, H, T, dh}), {0, 2, 1, 3}), {B, T, h});
        return linear(ctx, param(pre + ".wo.weight"), param(pre + ".wo.bias"));
    };

    const auto block = [&](Tensor x, const std::string& pre) {
        x = nd::add(x, maybe_dropout(attention(x, pre), p, opts));
        x = nd::layer_norm(x, param(pre + ".ln1.gamma"), param(pre + ".ln1.beta"));
        Tensor f = nd::gelu(linear(x, param(pre + ".ff1.weight"), param(pre + ".ff1.bias")));
        f = linear(f, param(pre + ".ff2.weight"), param(pre + ".ff2.bias"));
        x = nd::add(x, maybe_dropout(f, p, opts));
        return nd::layer_norm(x, param(pre + ".ln2.gamma"), param(pre + ".ln2.beta"));
    };

    // Kernel-3, stride-2 convolution over time with zero padding.
    const auto distill = [&](const Tensor& x, const std::string& pre) {
        const std::size_t T = x.dim(1);
        const std::size_t T2 = (T - 1) / 2 + 1;
        std::vector<Tensor> taps;
        for (int offset = -1; offset <= 1; ++offset) {
            std::vector<std::int64_t> idx(T2);
            for (std::size_t j = 0; j < T2; ++j) {
                const auto src = static_cast<std::int64_t>(2 * j) + offset;
                idx[j] = src >= 0 && src < static_cast<std::int64_t>(T) ? src : -1;
            }
            taps.push_back(nd::gather(x, 1, idx));
        }
        return nd::gelu(linear(nd::concat(taps, 2), param(pre + ".weight"), param(pre + ".bias")));
    };

    Tensor enc = embed(nd::slice(in.dynamic, 1, 0, L), 0);
    for (std::size_t k = 0; k < spec_.layers; ++k) {
        enc = block(enc, "enc" + std::to_string(k));
        if (k + 1 < spec_.layers) enc = distill(enc, "distill" + std::to_string(k));
    }
    enc = nd::layer_norm(enc, param("enc_norm.gamma"), param("enc_norm.beta"));

    Tensor dec = embed(nd::slice(in.dynamic, 1, L - Wd, L + 1), L - Wd);
    Tensor seq = nd::concat({enc, dec}, 1);
    for (std::size_t k = 0; k < kDecoderBlocks; ++k) seq = block(seq, "dec" + std::to_string(k));
    seq = nd::layer_norm(seq, param("dec_norm.gamma"), param("dec_norm.beta"));
    const std::size_t T = seq.dim(1);
    Tensor lastok = nd::reshape(nd::slice(seq, 1, T - 1, T), {B, h});
    Tensor z = nd::gelu(linear(lastok, param("out1.weight"), param("out1.bias")));
    return linear(z, param("out2.weight"), param("out2.bias"));
}

// ------------------------------------------------------------------ data views

NormalizedData normalize(const data::BasinDataset& ds, const data::DatasetNormalizer& norm) {
    NormalizedData out;
    out.n_days = ds.n_days();
    out.n_dynamic = ds.n_dynamic();
    out.n_static = ds.n_static();
    out.n_targets = ds.n_targets();
    if (norm.dynamic.columns.size() != out.n_dynamic || norm.statics.columns.size() != out.n_static ||
        norm.targets.columns.size() != out.n_targets)
        throw DimensionError("normaliser does not match the dataset columns");
    for (const auto& c : ds.dynamic_columns) out.dynamic_groups.push_back(c.group);
    for (const auto& c : ds.static_columns) out.static_groups.push_back(c.group);
    for (const auto& b : ds.basins) {
        Matrix dyn(out.n_days, out.n_dynamic);
        std::vector<std::uint8_t> present(out.n_days * out.n_dynamic, 1);
        for (std::size_t d = 0; d < out.n_days; ++d)
            for (std::size_t c = 0; c < out.n_dynamic; ++c) {
                const double v = b.dynamics(d, c);
                if (std::isnan(v)) {
                    dyn(d, c) = kFillValue;
                    present[d * out.n_dynamic + c] = 0;
                } else {
                    dyn(d, c) = norm.dynamic.apply(c, v);
                }
            }
        out.dynamic.push_back(std::move(dyn));
        out.dyn_present.push_back(std::move(present));
        std::vector<double> st(out.n_static);
        for (std::size_t c = 0; c < out.n_static; ++c) {
            const double v = b.statics[c];
            st[c] = std::isnan(v) ? kFillValue : norm.statics.apply(c, v);
        }
        out.statics.push_back(std::move(st));
        out.coords.push_back({norm.coords.apply(0, b.longitude), norm.coords.apply(1, b.latitude)});
        Matrix tg(out.n_days, out.n_targets, kNaN);
        for (std::size_t d = 0; d < out.n_days; ++d)
            for (std::size_t t = 0; t < out.n_targets; ++t)
                if (b.observed(d, t)) tg(d, t) = norm.targets.apply(t, b.targets(d, t));
        out.targets.push_back(std::move(tg));
    }
    return out;
}

NormalizedData without_groups(const NormalizedData& data, const std::set<data::FeatureGroup>& removed) {
    NormalizedData out = data;
    for (std::size_t c = 0; c < out.n_dynamic; ++c) {
        if (!removed.count(out.dynamic_groups[c])) continue;
        for (auto& m : out.dynamic)
            for (std::size_t d = 0; d < out.n_days; ++d) m(d, c) = 0.0;
    }
    for (std::size_t c = 0; c < out.n_static; ++c) {
        if (!removed.count(out.static_groups[c])) continue;
        for (auto& s : out.statics) s[c] = 0.0;
    }
    return out;
}

Batch make_batch(const NormalizedData& data, std::span<const data::RowIndex> rows, const ModelSpec& spec,
                 const WindowDeltas* deltas) {
    if (spec.n_dynamic != data.n_dynamic || spec.n_static != data.n_static || spec.n_targets != data.n_targets)
        throw DimensionError("model spec does not match the data columns");
    const std::size_t B = rows.size(), W = window_rows(spec), F = data.n_dynamic, S = data.n_static,
                      NT = data.n_targets;
    // Offset of the first window row relative to the sample day.
    const long lead = spec.family == Family::Recurrent ? static_cast<long>(spec.seq_len) - 1
                      : spec.family == Family::Attention ? static_cast<long>(spec.seq_len)
                                                         : 0;
    Batch batch;
    batch.size = B;
    std::vector<double> dyn(B * W * F, kFillValue), st(B * S), co(B * 2);
    batch.dyn_present.assign(B * W * F, 0);
    batch.targets.assign(B * NT, 0.0);
    batch.mask.assign(B * NT, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
        const auto& r = rows[i];
        const Matrix& m = data.dynamic[r.basin];
        const auto& present = data.dyn_present[r.basin];
        for (std::size_t w = 0; w < W; ++w) {
            const long day = static_cast<long>(r.day) - lead + static_cast<long>(w);
            if (day < 0) continue;
            const auto src = m.row(static_cast<std::size_t>(day));
            std::copy(src.begin(), src.end(), dyn.begin() + static_cast<std::ptrdiff_t>((i * W + w) * F));
            std::copy_n(present.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(day) * F), F,
                        batch.dyn_present.begin() + static_cast<std::ptrdiff_t>((i * W + w) * F));
        }
        if (deltas) {
            const auto it = deltas->find(r);
            if (it != deltas->end()) {
                if (it->second.size() != W * F) throw DimensionError("window delta has the wrong size");
                for (std::size_t k = 0; k < W * F; ++k) dyn[i * W * F + k] += it->second[k];
            }
        }
        std::copy(data.statics[r.basin].begin(), data.statics[r.basin].end(), st.begin() + static_cast<std::ptrdiff_t>(i * S));
        co[2 * i] = data.coords[r.basin][0];
        co[2 * i + 1] = data.coords[r.basin][1];
        for (std::size_t t = 0; t < NT; ++t) {
            const double y = data.targets[r.basin](r.day, t);
            if (std::isnan(y)) continue;
            batch.targets[i * NT + t] = y;
            batch.mask[i * NT + t] = 1.0;
        }
    }
    batch.input.dynamic = Tensor({B, W, F}, std::move(dyn));
    batch.input.statics = Tensor({B, S}, std::move(st));
    batch.input.coords = Tensor({B, 2}, std::move(co));
    return batch;
}

Tensor masked_mse(const Tensor& pred, const Batch& batch) {
    const double count = std::accumulate(batch.mask.begin(), batch.mask.end(), 0.0);
    if (count == 0.0) throw ContractError("batch has no observed targets");
    const Shape shape = pred.shape();
    Tensor diff = nd::sub(pred, Tensor(shape, batch.targets));
    Tensor sq = nd::mul(nd::mul(diff, diff), Tensor(shape, batch.mask));
    return nd::scale(nd::sum(sq), 1.0 / count);
}

// ------------------------------------------------------------------ training

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (cfg.batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (cfg.schedule == Schedule::Step && cfg.decay_every < 1) throw ConfigError("decay interval must be at least 1");
    if (cfg.schedule == Schedule::Cosine && !(cfg.min_lr >= 0.0 && cfg.min_lr <= cfg.lr))
        throw ConfigError("minimum learning rate must lie in [0, lr]");
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
    if (cfg.schedule == Schedule::Step)
        return cfg.lr * std::pow(cfg.decay, static_cast<double>(epoch / cfg.decay_every));
    if (cfg.epochs <= 1) return cfg.min_lr;
    const double progress = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void train(Model& model, const NormalizedData& data, std::span<const data::RowIndex> rows,
           const TrainConfig& cfg, std::uint64_t seed, std::vector<double>* epoch_loss,
           const WindowDeltas* deltas) {
    validate(cfg);
    std::vector<data::RowIndex> usable;
    for (const auto& r : rows) {
        const auto tr = data.targets[r.basin].row(r.day);
        if (std::any_of(tr.begin(), tr.end(), [](double v) { return !std::isnan(v); })) usable.push_back(r);
    }
    if (usable.empty()) throw ConfigError("empty training set: no rows with observed targets");

    auto& params = model.parameters();
    std::vector<std::vector<double>> m1(params.size()), m2(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m1[i].assign(params[i].second.numel(), 0.0);
        m2[i].assign(params[i].second.numel(), 0.0);
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::mt19937_64 shuffle_rng(mix_seed(seed, 1));
    std::mt19937_64 dropout_rng(mix_seed(seed, 2));
    std::size_t step = 0;
    const std::size_t per_epoch =
        cfg.samples_per_epoch > 0 ? std::min(cfg.samples_per_epoch, usable.size()) : usable.size();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = learning_rate(cfg, epoch);
        std::shuffle(usable.begin(), usable.end(), shuffle_rng);
        double loss_sum = 0.0, weight_sum = 0.0;
        for (std::size_t start = 0; start < per_epoch; start += cfg.batch_size) {
            const std::size_t end = std::min(per_epoch, start + cfg.batch_size);
            const Batch batch =
                make_batch(data, std::span(usable).subspan(start, end - start), model.spec(), deltas);
            ForwardOptions fo;
            fo.training = true;
            fo.rng = &dropout_rng;
            const Tensor loss = masked_mse(model.forward(batch.input, fo), batch);
            nd::backward(loss);
            const double n_obs = std::accumulate(batch.mask.begin(), batch.mask.end(), 0.0);
            loss_sum += loss.item() * n_obs;
            weight_sum += n_obs;

            ++step;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor& p = params[i].second;
                if (!p.has_grad()) continue;
                const auto g = p.grad();
                auto w = p.mutable_data();
                const bool decoupled = cfg.optimizer == Optimizer::AdamW;
                for (std::size_t j = 0; j < w.size(); ++j) {
                    if (decoupled) w[j] -= lr * cfg.weight_decay * w[j];
                    m1[i][j] = b1 * m1[i][j] + (1.0 - b1) * g[j];
                    m2[i][j] = b2 * m2[i][j] + (1.0 - b2) * g[j] * g[j];
                    w[j] -= lr * (m1[i][j] / c1) / (std::sqrt(m2[i][j] / c2) + eps);
                }
                p.zero_grad();
            }
        }
        if (epoch_loss) epoch_loss->push_back(loss_sum / weight_sum);
    }
}

TrainedModel fit(const ModelSpec& spec, const TrainConfig& cfg, const data::DatasetNormalizer& norm,
                 const NormalizedData& data, std::span<const data::RowIndex> rows, std::uint64_t seed,
                 const WindowDeltas* deltas) {
    TrainedModel tm;
    tm.model = Model::build(spec, seed);
    tm.normalizer = norm;
    tm.seed = seed;
    train(tm.model, data, rows, cfg, splitmix64(seed), &tm.epoch_loss, deltas);
    return tm;
}

Matrix predict(Model& model, const NormalizedData& data, std::span<const data::RowIndex> rows,
               const ForwardOptions& opts, std::size_t batch_size) {
    nd::NoGradGuard guard;
    const std::size_t NT = model.spec().n_targets;
    Matrix out(rows.size(), NT);
    for (std::size_t start = 0; start < rows.size(); start += batch_size) {
        const std::size_t end = std::min(rows.size(), start + batch_size);
        const Batch batch = make_batch(data, rows.subspan(start, end - start), model.spec());
        const Tensor y = model.forward(batch.input, opts);
        std::copy(y.data().begin(), y.data().end(), out.values().begin() + static_cast<std::ptrdiff_t>(start * NT));
    }
    return out;
}

Matrix denormalize(const Matrix& normalized, const data::DatasetNormalizer& norm) {
    Matrix out(normalized.rows(), normalized.cols());
    for (std::size_t r = 0; r < normalized.rows(); ++r)
        for (std::size_t c = 0; c < normalized.cols(); ++c) out(r, c) = norm.targets.invert(c, normalized(r, c));
    return out;
}

// ------------------------------------------------------------------ checkpoints

namespace {

using nlohmann::json;
constexpr char kMagic[8] = {'W', 'Q', 'T', 'C', 'K', 'P', 'T', '1'};

json stats_json(const data::NormStats& s) {
    json arr = json::array();
    for (const auto& c : s.columns)
        arr.push_back({{"name", c.name},
                       {"method", std::string(data::to_string(c.method))},
                       {"offset", c.offset},
                       {"lo", c.lo},
                       {"hi", c.hi},
                       {"constant", c.constant}});
    return arr;
}

data::NormStats stats_from(const json& arr) {
    data::NormStats s;
    for (const auto& j : arr) {
        data::ColumnStats c;
        c.name = j.at("name").get<std::string>();
        c.method = data::parse_norm_method(j.at("method").get<std::string>());
        c.offset = j.at("offset").get<double>();
        c.lo = j.at("lo").get<double>();
        c.hi = j.at("hi").get<double>();
        c.constant = j.at("constant").get<bool>();
        s.columns.push_back(std::move(c));
    }
    return s;
}

void put_doubles(std::ostream& os, std::span<const double> v) {
    static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

} // namespace

void save_checkpoint(const TrainedModel& tm, const std::filesystem::path& path) {
    const ModelSpec& sp = tm.model.spec();
    json header;
    header["spec"] = {{"family", std::string(to_string(sp.family))},
                      {"seq_len", sp.seq_len},
                      {"decoder_window", sp.decoder_window},
                      {"hidden", sp.hidden},
                      {"layers", sp.layers},
                      {"dropout", sp.dropout},
                      {"heads", sp.heads},
                      {"ff_dim", sp.ff_dim},
                      {"head_widths", sp.head_widths},
                      {"n_dynamic", sp.n_dynamic},
                      {"n_static", sp.n_static},
                      {"n_targets", sp.n_targets}};
    header["seed"] = tm.seed;
    header["epoch_loss"] = tm.epoch_loss;
    header["normalizer"] = {{"dynamic", stats_json(tm.normalizer.dynamic)},
                            {"statics", stats_json(tm.normalizer.statics)},
                            {"targets", stats_json(tm.normalizer.targets)},
                            {"coords", stats_json(tm.normalizer.coords)}};
    std::size_t offset = 0;
    json tensors = json::array();
    for (const auto& [name, t] : tm.model.parameters()) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }
    json buffers = json::array();
    for (const auto& [name, v] : tm.model.buffers()) {
        buffers.push_back({{"name", name}, {"size", v.size()}, {"offset", offset}});
        offset += v.size();
    }
    header["tensors"] = tensors;
    header["buffers"] = buffers;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tm.model.parameters()) put_doubles(os, t.data());
    for (const auto& [name, v] : tm.model.buffers()) put_doubles(os, v);
    if (!os) throw IoError("failed writing checkpoint " + path.string());
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw IoError(path.string() + " is not a checkpoint");
    if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30))
        throw IoError("corrupt checkpoint header in " + path.string());
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("truncated checkpoint " + path.string());
    const std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) throw IoError("truncated checkpoint payload in " + path.string());
    std::vector<double> payload(rest.size() / sizeof(double));
    std::memcpy(payload.data(), rest.data(), rest.size());

    try {
        const json header = json::parse(text);
        const json& js = header.at("spec");
        ModelSpec sp;
        sp.family = parse_family(js.at("family").get<std::string>());
        sp.seq_len = js.at("seq_len").get<std::size_t>();
        sp.decoder_window = js.at("decoder_window").get<std::size_t>();
        sp.hidden = js.at("hidden").get<std::size_t>();
        sp.layers = js.at("layers").get<std::size_t>();
        sp.dropout = js.at("dropout").get<double>();
        sp.heads = js.at("heads").get<std::size_t>();
        sp.ff_dim = js.at("ff_dim").get<std::size_t>();
        sp.head_widths = js.at("head_widths").get<std::vector<std::size_t>>();
        sp.n_dynamic = js.at("n_dynamic").get<std::size_t>();
        sp.n_static = js.at("n_static").get<std::size_t>();
        sp.n_targets = js.at("n_targets").get<std::size_t>();

        TrainedModel tm;
        tm.model = Model::build(sp, 0);
        tm.seed = header.at("seed").get<std::uint64_t>();
        tm.epoch_loss = header.at("epoch_loss").get<std::vector<double>>();
        const json& jn = header.at("normalizer");
        tm.normalizer.dynamic = stats_from(jn.at("dynamic"));
        tm.normalizer.statics = stats_from(jn.at("statics"));
        tm.normalizer.targets = stats_from(jn.at("targets"));
        tm.normalizer.coords = stats_from(jn.at("coords"));

        const auto take = [&](std::size_t offset, std::size_t n) {
            if (offset + n > payload.size()) throw IoError("checkpoint payload too short");
            return std::span<const double>(payload).subspan(offset, n);
        };
        auto& params = tm.model.parameters();
        const json& jt = header.at("tensors");
        if (jt.size() != params.size()) throw IoError("checkpoint tensor count does not match its spec");
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& [name, t] = params[i];
            if (jt[i].at("name").get<std::string>() != name || jt[i].at("shape").get<nd::Shape>() != t.shape())
                throw IoError("checkpoint tensor '" + name + "' does not match its spec");
            const auto src = take(jt[i].at("offset").get<std::size_t>(), t.numel());
            std::copy(src.begin(), src.end(), t.mutable_data().begin());
        }
        auto& bufs = tm.model.buffers();
        const json& jb = header.at("buffers");
        if (jb.size() != bufs.size()) throw IoError("checkpoint buffer count does not match its spec");
        for (std::size_t i = 0; i < bufs.size(); ++i) {
            auto& [name, v] = bufs[i];
            if (jb[i].at("name").get<std::string>() != name || jb[i].at("size").get<std::size_t>() != v.size())
                throw IoError("checkpoint buffer '" + name + "' does not match its spec");
            const auto src = take(jb[i].at("offset").get<std::size_t>(), v.size());
            std::copy(src.begin(), src.end(), v.begin());
        }
        return tm;
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
}

} // namespace wqt::models
