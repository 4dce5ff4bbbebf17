#include "anchorseg/model.hpp"

#include <cmath>
#include <stdexcept>

#include "anchorseg/blob_io.hpp"
#include "anchorseg/rng.hpp"

namespace anchorseg {

namespace {

// (S,C,H,W) -> (S, C*r*r, H/r, W/r); channel layout [C][ry][rx]
Tensor space_to_depth(const Tensor& x, int r) {
    auto s = x.shape();
    std::int64_t S = s[0], C = s[1], H = s[2], W = s[3];
    auto t = reshape(x, {S, C, H / r, r, W / r, r});
    t = permute(t, {0, 1, 3, 5, 2, 4});
    return reshape(t, {S, C * r * r, H / r, W / r});
}

// nearest-neighbor x2 upsample
Tensor up2(const Tensor& x) {
    auto s = x.shape();
    std::int64_t S = s[0], C = s[1], h = s[2], w = s[3];
    auto t = reshape(x, {S, C, 1, h, w});
    t = concat({t, t, t, t}, 2);                      // (S,C,4,h,w)
    t = reshape(t, {S, C, 2, 2, h, w});
    t = permute(t, {0, 1, 4, 2, 5, 3});               // (S,C,h,2,w,2)
    return reshape(t, {S, C, 2 * h, 2 * w});
}

Tensor avg_pool(const Tensor& x, int r) {
    auto s = x.shape();
    std::int64_t S = s[0], C = s[1], H = s[2], W = s[3];
    auto t = reshape(x, {S, C, H / r, r, W / r, r});
    t = permute(t, {0, 1, 2, 4, 3, 5});               // (S,C,h,w,r,r)
    t = reshape(t, {S, C, H / r, W / r, static_cast<std::int64_t>(r) * r});
    return mean(t, 4);
}

double fan_in_bound(std::int64_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

std::map<std::string, std::string> ModelConfig::to_map() const {
    std::map<std::string, std::string> m;
    m["channels"] = std::to_string(channels);
    m["layers"] = std::to_string(layers);
    m["n_queries"] = std::to_string(n_queries);
    m["heads"] = std::to_string(heads);
    m["n_freqs"] = std::to_string(n_freqs);
    m["ffn_mult"] = std::to_string(ffn_mult);
    m["disable_geo"] = disable_geo ? "1" : "0";
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    m["room_lo"] = fmt(room_lo[0]) + "," + fmt(room_lo[1]) + "," + fmt(room_lo[2]);
    m["room_hi"] = fmt(room_hi[0]) + "," + fmt(room_hi[1]) + "," + fmt(room_hi[2]);
    return m;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& m) {
    ModelConfig c;
    auto geti = [&](const char* k, int& out) {
        auto it = m.find(k);
        if (it != m.end()) out = std::stoi(it->second);
    };
    geti("channels", c.channels);
    geti("layers", c.layers);
    geti("n_queries", c.n_queries);
    geti("heads", c.heads);
    geti("n_freqs", c.n_freqs);
    geti("ffn_mult", c.ffn_mult);
    auto it = m.find("disable_geo");
    if (it != m.end()) c.disable_geo = it->second == "1";
    auto getv = [&](const char* k, Vec3& out) {
        auto i = m.find(k);
        if (i == m.end()) return;
        std::sscanf(i->second.c_str(), "%lf,%lf,%lf", &out[0], &out[1], &out[2]);
    };
    getv("room_lo", c.room_lo);
    getv("room_hi", c.room_hi);
    return c;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    RngStream rng(seed, "model-init");
    const std::int64_t C = cfg.channels;
    auto dense = [&](const std::string& name, std::int64_t in, std::int64_t out, bool zero = false) {
        std::vector<double> w(static_cast<std::size_t>(in * out), 0.0);
        if (!zero) {
            double b = fan_in_bound(in);
            for (auto& v : w) v = rng.uniform(-b, b);
        }
        params_[name + ".w"] = Tensor::from_data({in, out}, std::move(w), true);
        params_[name + ".b"] = Tensor::zeros({out}, true);
    };
    auto lnorm = [&](const std::string& name, std::int64_t n) {
        params_[name + ".g"] = Tensor::full({n}, 1.0, true);
        params_[name + ".b"] = Tensor::zeros({n}, true);
    };

    // backbone: patch-merging stages, all levels width C
    dense("backbone.stem.a", 48, C);
    dense("backbone.stem.b", C, C);
    for (const char* st : {"s8", "s16", "s32"}) {
        dense(std::string("backbone.") + st + ".a", 4 * C, C);
        dense(std::string("backbone.") + st + ".b", C, C);
    }

    // geometry-injected pixel decoder
    dense("pixdec.geo", 3, C);
    dense("pixdec.fuse32", C, C);
    for (const char* lv : {"16", "8", "4"}) {
        dense(std::string("pixdec.lat") + lv, C, C);
        dense(std::string("pixdec.fuse") + lv, C, C);
    }
    dense("pixdec.mask_out", C, C);

    // anchor generator
    {
        std::vector<double> a(static_cast<std::size_t>(cfg.n_queries) * 3);
        for (int q = 0; q < cfg.n_queries; ++q)
            for (int d = 0; d < 3; ++d)
                a[q * 3 + d] = rng.uniform(cfg.room_lo[d], cfg.room_hi[d]);
        params_["anchor.init"] = Tensor::from_data({cfg.n_queries, 3}, std::move(a), true);
        std::vector<double> e(static_cast<std::size_t>(cfg.n_queries) * C);
        for (auto& v : e) v = rng.normal(0.0, 0.5);
        params_["anchor.content"] = Tensor::from_data({cfg.n_queries, C}, std::move(e), true);
    }
    dense("anchor.shift.a", C, C);
    dense("anchor.shift.b", C, cfg.n_queries * 3, /*zero=*/true);

    dense("pe.proj", 6 * cfg.n_freqs, C);

    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "dec." + std::to_string(l) + ".";
        lnorm(p + "ln1", C);
        dense(p + "self.q", C, C);
        dense(p + "self.k", C, C);
        dense(p + "self.v", C, C);
        dense(p + "self.o", C, C);
        lnorm(p + "ln2", C);
        dense(p + "cross.q", C, C);
        dense(p + "cross.k", C, C);
        dense(p + "cross.v", C, C);
        dense(p + "cross.o", C, C);
        lnorm(p + "ln3", C);
        dense(p + "ffn.a", C, cfg.ffn_mult * C);
        dense(p + "ffn.b", cfg.ffn_mult * C, C);
        dense(p + "refine.a", C, C);
        dense(p + "refine.b", C, 3, /*zero=*/true);
    }

    lnorm("head.ln", C);
    dense("head.cls", C, 2);
    dense("head.memb.a", C, C);
    dense("head.memb.b", C, C);
}

Tensor Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw TensorError("unknown parameter '" + name + "'");
    return it->second;
}

void Model::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
}

namespace {

Tensor apply_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    return matmul(x, w) + b;
}

}  // namespace

// dense layer applied per pixel of an (S,C,h,w) map
static Tensor linear_nchw(const Tensor& x, const Tensor& w, const Tensor& b) {
    auto s = x.shape();
    std::int64_t S = s[0], C = s[1], h = s[2], wd = s[3];
    auto t = permute(x, {0, 2, 3, 1});
    t = reshape(t, {S * h * wd, C});
    t = apply_rows(t, w, b);
    std::int64_t Cout = t.shape()[1];
    t = reshape(t, {S, h, wd, Cout});
    return permute(t, {0, 3, 1, 2});
}

BackboneFeatures Model::backbone_forward(const Tensor& images) const {
    auto s = images.shape();
    if (s.size() != 4 || s[1] != 3) throw TensorError("backbone: expected S x 3 x H x W input");
    if (s[2] % 32 != 0 || s[3] % 32 != 0)
        throw TensorError("backbone: resolution must be divisible by 32");
    auto stage = [&](const Tensor& x, const std::string& name, int r) {
        auto t = space_to_depth(x, r);
        t = relu(linear_nchw(t, param(name + ".a.w"), param(name + ".a.b")));
        t = relu(linear_nchw(t, param(name + ".b.w"), param(name + ".b.b")));
        return t;
    };
    BackboneFeatures f;
    f.f4 = stage(images, "backbone.stem", 4);
    f.f8 = stage(f.f4, "backbone.s8", 2);
    f.f16 = stage(f.f8, "backbone.s16", 2);
    f.f32 = stage(f.f16, "backbone.s32", 2);
    return f;
}

FeaturePyramid Model::pixel_decoder(const BackboneFeatures& feats, const Tensor& pointmap) const {
    auto s32 = feats.f32.shape();
    FeaturePyramid pyr;
    Tensor g32 = feats.f32;
    if (!cfg_.disable_geo) {
        if (!pointmap.defined())
            throw TensorError("pixel_decoder: pointmap required unless geometry is disabled");
        auto pm = pointmap.shape();
        if (pm.size() != 4 || pm[1] != 3 || pm[0] != s32[0])
            throw TensorError("pixel_decoder: pointmap shape mismatch");
        if (pm[2] != s32[2] * 32 || pm[3] != s32[3] * 32)
            throw TensorError("pixel_decoder: pointmap resolution mismatch");
        auto pooled = avg_pool(pointmap, 32);  // (S,3,h32,w32)
        auto inj = linear_nchw(pooled, param("pixdec.geo.w"), param("pixdec.geo.b"));
        g32 = g32 + inj;
    }
    pyr.f32 = relu(linear_nchw(g32, param("pixdec.fuse32.w"), param("pixdec.fuse32.b")));
    auto fuse_up = [&](const Tensor& top, const Tensor& skip, const std::string& lv) {
        auto lat = linear_nchw(skip, param("pixdec.lat" + lv + ".w"), param("pixdec.lat" + lv + ".b"));
        auto merged = up2(top) + lat;
        return relu(linear_nchw(merged, param("pixdec.fuse" + lv + ".w"), param("pixdec.fuse" + lv + ".b")));
    };
    pyr.f16 = fuse_up(pyr.f32, feats.f16, "16");
    pyr.f8 = fuse_up(pyr.f16, feats.f8, "8");
    auto p4 = fuse_up(pyr.f8, feats.f4, "4");
    // final mask embedding layer is linear so per-pixel features can be signed
    pyr.fmask = linear_nchw(p4, param("pixdec.mask_out.w"), param("pixdec.mask_out.b"));
    return pyr;
}

AnchorState Model::anchor_generator(const Tensor& f32) const {
    auto gamma = mean(mean(mean(f32, 3), 2), 0);  // (C)
    auto g = reshape(gamma, {1, -1});
    auto h = relu(apply_rows(g, param("anchor.shift.a.w"), param("anchor.shift.a.b")));
    auto shift = apply_rows(h, param("anchor.shift.b.w"), param("anchor.shift.b.b"));
    AnchorState st;
    st.anchors = param("anchor.init") + reshape(shift, {cfg_.n_queries, 3});
    st.content = param("anchor.content");
    return st;
}

Tensor Model::positional_encoding(const Tensor& anchors) const {
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(6 * cfg_.n_freqs));
    for (int axis = 0; axis < 3; ++axis) {
        auto col = slice(anchors, 1, axis, axis + 1);  // N_q x 1
        double scale = M_PI;
        for (int k = 0; k < cfg_.n_freqs; ++k) {
            parts.push_back(sin(col * scale));
            parts.push_back(cos(col * scale));
            scale *= 2.0;
        }
    }
    auto feats = concat(parts, 1);  // N_q x 6*n_freqs
    return apply_rows(feats, param("pe.proj.w"), param("pe.proj.b"));
}

Tensor Model::clamp_anchors(const Tensor& anchors) const {
    std::vector<Tensor> cols;
    for (int d = 0; d < 3; ++d) {
        double c = 0.5 * (cfg_.room_lo[d] + cfg_.room_hi[d]);
        double half = 0.5 * (cfg_.room_hi[d] - cfg_.room_lo[d]);
        cols.push_back(clamp(slice(anchors, 1, d, d + 1), c - 2 * half, c + 2 * half));
    }
    return concat(cols, 1);
}

AnchorState Model::decoder_layer(const AnchorState& state, const FeaturePyramid& pyr,
                                 const std::vector<Camera>& cameras, int layer_index) const {
    const std::int64_t C = cfg_.channels;
    const int heads = cfg_.heads;
    const std::int64_t d = C / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const std::int64_t Nq = cfg_.n_queries;
    const std::int64_t S = static_cast<std::int64_t>(cameras.size());
    std::string p = "dec." + std::to_string(layer_index) + ".";

    Tensor x = state.content;
    Tensor pe = positional_encoding(state.anchors);

    // 1. query self-attention (pre-norm, PE added to queries and keys only)
    {
        auto xn = layer_norm(x, param(p + "ln1.g"), param(p + "ln1.b"));
        auto qk_in = xn + pe;
        auto Q = apply_rows(qk_in, param(p + "self.q.w"), param(p + "self.q.b"));
        auto K = apply_rows(qk_in, param(p + "self.k.w"), param(p + "self.k.b"));
        auto V = apply_rows(xn, param(p + "self.v.w"), param(p + "self.v.b"));
        std::vector<Tensor> outs;
        for (int h = 0; h < heads; ++h) {
            auto qh = slice(Q, 1, h * d, (h + 1) * d);
            auto kh = slice(K, 1, h * d, (h + 1) * d);
            auto vh = slice(V, 1, h * d, (h + 1) * d);
            auto attn = softmax(matmul(qh, transpose2d(kh)) * scale, 1);
            outs.push_back(matmul(attn, vh));
        }
        auto o = apply_rows(concat(outs, 1), param(p + "self.o.w"), param(p + "self.o.b"));
        x = x + o;
    }

    // 2. anchor-sampling cross-attention: keys/values are the S per-view
    //    features bilinearly sampled at the projected anchor
    const Tensor* levels[3] = {&pyr.f32, &pyr.f16, &pyr.f8};
    const Tensor& level = *levels[layer_index % 3];
    {
        auto xn = layer_norm(x, param(p + "ln2.g"), param(p + "ln2.b"));
        auto q_in = xn + pe;
        auto Q = apply_rows(q_in, param(p + "cross.q.w"), param(p + "cross.q.b"));

        auto ls = level.shape();  // (S,C,h,w)
        std::int64_t lh = ls[2], lw = ls[3];
        int fullW = cameras.empty() ? 0 : cameras[0].width;
        int fullH = cameras.empty() ? 0 : cameras[0].height;
        // align-corners rescale: validity is decided at full resolution, so a
        // projection inside the image always has an interpolatable level coord
        double su = lw > 1 ? static_cast<double>(lw - 1) / (fullW - 1) : 0.0;
        double sv = lh > 1 ? static_cast<double>(lh - 1) / (fullH - 1) : 0.0;

        const auto& av = state.anchors.data();  // sampling coordinates carry no gradient
        std::vector<Tensor> per_view;
        std::vector<double> attn_mask(static_cast<std::size_t>(Nq * S), 0.0);
        std::vector<double> any_valid(static_cast<std::size_t>(Nq), 0.0);
        for (std::int64_t s = 0; s < S; ++s) {
            std::vector<std::array<double, 2>> uv(static_cast<std::size_t>(Nq));
            for (std::int64_t i = 0; i < Nq; ++i) {
                Vec3 a = {av[i * 3], av[i * 3 + 1], av[i * 3 + 2]};
                auto pr = project(a, cameras[s]);
                bool ok = pr.in_front(cfg_.near_clip) && pr.u() >= 0 && pr.u() <= fullW - 1 &&
                          pr.v() >= 0 && pr.v() <= fullH - 1;
                uv[i] = ok ? std::array<double, 2>{pr.u() * su, pr.v() * sv}
                           : std::array<double, 2>{-1e9, -1e9};
            }
            auto fmap = reshape(slice(level, 0, s, s + 1), {C, lh, lw});
            auto sampled = bilinear_sample(fmap, uv);  // N_q x C
            for (std::int64_t i = 0; i < Nq; ++i) {
                if (sampled.valid[i]) {
                    any_valid[i] = 1.0;
                    ++kv_pairs_;
                } else {
                    attn_mask[i * S + s] = -1e9;
                }
            }
            per_view.push_back(reshape(sampled.values, {Nq, 1, C}));
        }
        auto feats = concat(per_view, 1);  // N_q x S x C
        auto K = reshape(apply_rows(reshape(feats, {Nq * S, C}), param(p + "cross.k.w"),
                                    param(p + "cross.k.b")), {Nq, S, C});
        auto V = reshape(apply_rows(reshape(feats, {Nq * S, C}), param(p + "cross.v.w"),
                                    param(p + "cross.v.b")), {Nq, S, C});
        auto mask = Tensor::from_data({Nq, S}, attn_mask);
        auto gate = Tensor::from_data({Nq, 1}, any_valid);  // all-invalid queries skip cross-attn

        std::vector<Tensor> outs;
        for (int h = 0; h < heads; ++h) {
            auto qh = reshape(slice(Q, 1, h * d, (h + 1) * d), {Nq, 1, d});
            auto kh = slice(K, 2, h * d, (h + 1) * d);
            auto vh = slice(V, 2, h * d, (h + 1) * d);
            auto scores = sum(qh * kh, 2) * scale + mask;  // N_q x S
            auto w = softmax(scores, 1);
            outs.push_back(sum(reshape(w, {Nq, S, 1}) * vh, 1));  // N_q x d
        }
        auto o = apply_rows(concat(outs, 1), param(p + "cross.o.w"), param(p + "cross.o.b"));
        x = x + o * gate;
    }

    // 3. FFN, then residual anchor refinement from the updated content
    {
        auto xn = layer_norm(x, param(p + "ln3.g"), param(p + "ln3.b"));
        auto h = relu(apply_rows(xn, param(p + "ffn.a.w"), param(p + "ffn.a.b")));
        x = x + apply_rows(h, param(p + "ffn.b.w"), param(p + "ffn.b.b"));
    }
    AnchorState next;
    next.content = x;
    auto delta = apply_rows(relu(apply_rows(x, param(p + "refine.a.w"), param(p + "refine.a.b"))),
                            param(p + "refine.b.w"), param(p + "refine.b.b"));
    next.anchors = clamp_anchors(state.anchors + delta);
    return next;
}

Tensor Model::mask_head(const Tensor& mask_emb, const Tensor& fmask) const {
    auto fs = fmask.shape();  // (S,C,h,w)
    std::int64_t S = fs[0], C = fs[1], h = fs[2], w = fs[3];
    if (mask_emb.shape()[1] != C) throw TensorError("mask_head: channel width mismatch");
    std::int64_t Nq = mask_emb.shape()[0];
    std::vector<Tensor> views;
    for (std::int64_t s = 0; s < S; ++s) {
        auto f = reshape(slice(fmask, 0, s, s + 1), {C, h * w});
        views.push_back(reshape(matmul(mask_emb, f), {1, Nq, h, w}));
    }
    return concat(views, 0);
}

DecoderOutput Model::decoder_forward(const FeaturePyramid& pyr, const std::vector<Camera>& cameras,
                                     const AnchorState& init) const {
    DecoderOutput out;
    AnchorState st = init;
    for (int l = 0; l < cfg_.layers; ++l) {
        st = decoder_layer(st, pyr, cameras, l);
        auto hn = layer_norm(st.content, param("head.ln.g"), param("head.ln.b"));
        LayerOutput lo;
        lo.logits = apply_rows(hn, param("head.cls.w"), param("head.cls.b"));
        auto m = relu(apply_rows(hn, param("head.memb.a.w"), param("head.memb.a.b")));
        lo.mask_emb = apply_rows(m, param("head.memb.b.w"), param("head.memb.b.b"));
        lo.masks = mask_head(lo.mask_emb, pyr.fmask);
        lo.anchors = st.anchors;
        out.layers.push_back(std::move(lo));
    }
    return out;
}

Tensor Model::pointmap_tensor(const SceneSample& sm) {
    std::size_t hw = static_cast<std::size_t>(sm.height) * sm.width;
    std::vector<double> pm(static_cast<std::size_t>(sm.n_views) * 3 * hw, 0.0);
    for (int s = 0; s < sm.n_views; ++s) {
        auto view = unproject(
            std::vector<double>(sm.depths.begin() + static_cast<std::ptrdiff_t>(s * hw),
                                sm.depths.begin() + static_cast<std::ptrdiff_t>((s + 1) * hw)),
            sm.cameras[s]);
        for (std::size_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c)
                pm[(static_cast<std::size_t>(s) * 3 + c) * hw + i] = view.points[i][c];
    }
    return Tensor::from_data({sm.n_views, 3, sm.height, sm.width}, std::move(pm));
}

Tensor Model::images_tensor(const SceneSample& sm) {
    return Tensor::from_data({sm.n_views, 3, sm.height, sm.width}, sm.images);
}

Model::ForwardResult Model::forward(const SceneSample& sample) const {
    auto feats = backbone_forward(images_tensor(sample));
    auto pyr = pixel_decoder(feats, cfg_.disable_geo ? Tensor() : pointmap_tensor(sample));
    auto st = anchor_generator(pyr.f32);
    auto out = decoder_forward(pyr, sample.cameras, st);
    return {std::move(pyr), std::move(out)};
}

void Model::save_checkpoint(const std::string& dir,
                            const std::map<std::string, std::string>& extra) const {
    Container c;
    for (const auto& [name, t] : params_)
        c.set("param/" + name, Field::f64(t.shape(), t.data()));
    std::string cfgtext;
    for (const auto& [k, v] : cfg_.to_map()) cfgtext += k + "=" + v + "\n";
    for (const auto& [k, v] : extra) cfgtext += "extra." + k + "=" + v + "\n";
    c.set("config", Field::u8({static_cast<std::int64_t>(cfgtext.size())},
                              std::vector<std::uint8_t>(cfgtext.begin(), cfgtext.end())));
    c.write(dir);
}

Model Model::load_checkpoint(const std::string& dir, std::map<std::string, std::string>* extra) {
    Container c = Container::read(dir);
    auto cfg_bytes = c.get("config").as_u8();
    std::string text(cfg_bytes.begin(), cfg_bytes.end());
    std::map<std::string, std::string> kv;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto key = line.substr(0, eq);
        auto val = line.substr(eq + 1);
        if (key.rfind("extra.", 0) == 0) {
            if (extra) (*extra)[key.substr(6)] = val;
        } else {
            kv[key] = val;
        }
    }
    Model m(ModelConfig::from_map(kv));
    for (auto& [name, t] : m.params_) {
        const Field& f = c.get("param/" + name);
        if (f.shape != t.shape())
            throw FormatError("checkpoint parameter '" + name + "': shape mismatch (expected " +
                              shape_str(t.shape()) + ", got " + shape_str(f.shape) + ")");
        t.mutable_data() = f.as_f64();
    }
    return m;
}

}  // namespace anchorseg
