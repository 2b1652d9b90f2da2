#include "cov3d/lung_segmentation.hpp"

#include <chrono>
#include <cstring>
#include <cmath>
#include <map>
#include <numeric>

#include "cov3d/io.hpp"
#include "cov3d/rng.hpp"

namespace cov3d {

namespace tnn = torch::nn;
using torch::Tensor;

void SegmentationConfig::validate() const {
    if (depth < 1 || depth > 8) throw Error("segmentation", "depth must be in [1, 8]");
    if (base_channels < 1) throw Error("segmentation", "base_channels must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("segmentation", "threshold must lie strictly inside (0,1)");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw Error("segmentation", "holdout_fraction must be in [0,1)");
}

nlohmann::json SegmentationConfig::to_json() const {
    return {{"depth", depth},
            {"base_channels", base_channels},
            {"threshold", threshold},
            {"auto_pad", auto_pad},
            {"holdout_fraction", holdout_fraction}};
}

SegmentationConfig SegmentationConfig::from_json(const nlohmann::json& j) {
    SegmentationConfig c;
    c.depth = j.value("depth", c.depth);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.threshold = j.value("threshold", c.threshold);
    c.auto_pad = j.value("auto_pad", c.auto_pad);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    c.validate();
    return c;
}

namespace {

class DoubleConvImpl : public tnn::Module {
public:
    DoubleConvImpl(std::int64_t in, std::int64_t out)
        : conv1(register_module("conv1", tnn::Conv2d(tnn::Conv2dOptions(in, out, 3).padding(1).bias(false)))),
          bn1(register_module("bn1", tnn::BatchNorm2d(out))),
          conv2(register_module("conv2", tnn::Conv2d(tnn::Conv2dOptions(out, out, 3).padding(1).bias(false)))),
          bn2(register_module("bn2", tnn::BatchNorm2d(out))) {}
    Tensor forward(const Tensor& x) { return torch::relu(bn2(conv2(torch::relu(bn1(conv1(x)))))); }

    tnn::Conv2d conv1;
    tnn::BatchNorm2d bn1;
    tnn::Conv2d conv2;
    tnn::BatchNorm2d bn2;
};
TORCH_MODULE(DoubleConv);

/// Additive gate: x * sigmoid(psi(relu(W_g g + W_x x))).
class AttentionGateImpl : public tnn::Module {
public:
    AttentionGateImpl(std::int64_t f_g, std::int64_t f_l, std::int64_t f_int)
        : W_g(register_module("W_g", tnn::Sequential(tnn::Conv2d(tnn::Conv2dOptions(f_g, f_int, 1)), tnn::BatchNorm2d(f_int)))),
          W_x(register_module("W_x", tnn::Sequential(tnn::Conv2d(tnn::Conv2dOptions(f_l, f_int, 1)), tnn::BatchNorm2d(f_int)))),
          psi(register_module("psi", tnn::Sequential(tnn::Conv2d(tnn::Conv2dOptions(f_int, 1, 1)), tnn::BatchNorm2d(1)))) {}
    Tensor forward(const Tensor& g, const Tensor& x) {
        const Tensor a = torch::relu(W_g->forward(g) + W_x->forward(x));
        return x * torch::sigmoid(psi->forward(a));
    }

    tnn::Sequential W_g, W_x, psi;
};
TORCH_MODULE(AttentionGate);

}  // namespace

AttentionUNetImpl::AttentionUNetImpl(int depth, int base_channels) : depth_(depth), base_(base_channels) {
    if (depth < 1) throw Error("segmentation", "depth must be >= 1");
    std::vector<std::int64_t> ch;
    for (int l = 0; l <= depth; ++l) ch.push_back(static_cast<std::int64_t>(base_channels) << l);
    enc_->push_back(DoubleConv(1, ch[0]));
    for (int l = 1; l <= depth; ++l) enc_->push_back(DoubleConv(ch[l - 1], ch[l]));
    for (int l = depth - 1; l >= 0; --l) {
        up_->push_back(tnn::ConvTranspose2d(tnn::ConvTranspose2dOptions(ch[l + 1], ch[l], 2).stride(2)));
        gate_->push_back(AttentionGate(ch[l], ch[l], std::max<std::int64_t>(1, ch[l] / 2)));
        dec_->push_back(DoubleConv(2 * ch[l], ch[l]));
    }
    register_module("enc", enc_);
    register_module("up", up_);
    register_module("gate", gate_);
    register_module("dec", dec_);
    head_ = register_module("head", tnn::Conv2d(tnn::Conv2dOptions(ch[0], 1, 1)));
}

Tensor AttentionUNetImpl::forward(const Tensor& x) {
    const std::int64_t m = std::int64_t{1} << depth_;
    if (x.dim() != 4 || x.size(1) != 1) throw Error("segment_lungs", "expected [B,1,H,W] input");
    if (x.size(2) % m != 0 || x.size(3) % m != 0)
        throw Error("segment_lungs", "input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                                         " is not divisible by " + std::to_string(m) + "; pad to " +
                                         std::to_string(padded_extent(x.size(2), depth_)) + "x" +
                                         std::to_string(padded_extent(x.size(3), depth_)) + " or enable auto-pad");
    std::vector<Tensor> skips;
    Tensor h = enc_[0]->as<DoubleConvImpl>()->forward(x);
    for (int l = 1; l <= depth_; ++l) {
        skips.push_back(h);
        h = enc_[static_cast<std::size_t>(l)]->as<DoubleConvImpl>()->forward(torch::max_pool2d(h, 2, 2));
    }
    for (int i = 0; i < depth_; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const Tensor skip = skips[static_cast<std::size_t>(depth_ - 1 - i)];
        const Tensor g = up_[idx]->as<tnn::ConvTranspose2dImpl>()->forward(h);
        const Tensor gated = gate_[idx]->as<AttentionGateImpl>()->forward(g, skip);
        h = dec_[idx]->as<DoubleConvImpl>()->forward(torch::cat({gated, g}, 1));
    }
    return head_(h);
}

std::int64_t padded_extent(std::int64_t n, int depth) {
    const std::int64_t m = std::int64_t{1} << depth;
    return (n + m - 1) / m * m;
}

namespace {

/// [1, H', W'] tensor, zero-padded at the bottom/right when auto-padding.
Tensor prepared_input(const Image& slice, const SegmentationConfig& cfg) {
    Tensor t = torch::from_blob(const_cast<float*>(slice.pixels.data()), {1, slice.height, slice.width}, torch::kFloat32)
                   .clone();
    if (!cfg.auto_pad) return t;
    const auto ph = padded_extent(slice.height, cfg.depth) - slice.height;
    const auto pw = padded_extent(slice.width, cfg.depth) - slice.width;
    if (ph == 0 && pw == 0) return t;
    return torch::constant_pad_nd(t, {0, pw, 0, ph}, 0.0);
}

Tensor prepared_mask(const BinaryMask& mask, const SegmentationConfig& cfg) {
    Image as_image(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.bits.size(); ++i) as_image.pixels[i] = mask.bits[i] ? 1.0f : 0.0f;
    return prepared_input(as_image, cfg);
}

BinaryMask to_mask(const Tensor& prob, std::int64_t height, std::int64_t width, double threshold) {
    const Tensor crop = prob.slice(0, 0, height).slice(1, 0, width).contiguous();
    const Tensor bits = crop.ge(threshold).to(torch::kUInt8).contiguous();
    BinaryMask m(height, width);
    std::memcpy(m.bits.data(), bits.data_ptr<std::uint8_t>(), m.bits.size());
    return m;
}

}  // namespace

std::vector<BinaryMask> segment_lungs(std::span<const Image> slices, SegmentationModel& model) {
    model.config.validate();
    std::vector<BinaryMask> out(slices.size());
    if (slices.empty()) return out;
    model.net->eval();
    torch::NoGradGuard guard;

    // Batch slices of equal shape together.
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        if (slices[i].height < 1 || slices[i].width < 1) throw Error("segment_lungs", "empty slice");
        groups[{slices[i].height, slices[i].width}].push_back(i);
    }
    constexpr std::size_t kChunk = 16;
    for (const auto& [shape, idx] : groups) {
        for (std::size_t s = 0; s < idx.size(); s += kChunk) {
            std::vector<Tensor> batch;
            const std::size_t e = std::min(idx.size(), s + kChunk);
            for (std::size_t i = s; i < e; ++i) batch.push_back(prepared_input(slices[idx[i]], model.config));
            const Tensor prob = torch::sigmoid(model.net->forward(torch::stack(batch)));
            for (std::size_t i = s; i < e; ++i)
                out[idx[i]] = to_mask(prob[static_cast<std::int64_t>(i - s)][0], shape.first, shape.second,
                                      model.config.threshold);
        }
    }
    return out;
}

BinaryMask segment_lungs(const Image& slice, SegmentationModel& model) {
    return segment_lungs(std::span<const Image>(&slice, 1), model).front();
}

Image apply_mask(const Image& slice, const BinaryMask& mask) {
    if (!mask.same_shape(slice))
        throw Error("apply_mask", "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                      " does not match slice " + std::to_string(slice.height) + "x" +
                                      std::to_string(slice.width));
    Image out = slice;
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        if (!mask.bits[i]) out.pixels[i] = 0.0f;
    return out;
}

double dice(const BinaryMask& pred, const BinaryMask& truth) {
    if (!pred.same_shape(truth)) throw Error("dice", "mask shapes differ");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.bits.size(); ++i) {
        const bool p = pred.bits[i] != 0, t = truth.bits[i] != 0;
        a += p;
        b += t;
        both += p && t;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double mean_dice(SegmentationModel& model, const std::vector<MaskPair>& pairs) {
    if (pairs.empty()) throw Error("mean_dice", "no pairs");
    std::vector<Image> slices;
    for (const auto& p : pairs) slices.push_back(p.slice);
    const auto masks = segment_lungs(slices, model);
    double sum = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) sum += dice(masks[i], pairs[i].mask);
    return sum / static_cast<double>(pairs.size());
}

SegmenterTrained train_segmenter(const std::vector<MaskPair>& pairs, const TrainConfig& config,
                                 const SegmentationConfig& seg_config) {
    config.validate();
    seg_config.validate();
    if (pairs.empty()) throw Error("train_segmenter", "empty input");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (!pairs[i].mask.same_shape(pairs[i].slice))
            throw Error("train_segmenter", "shape mismatch between slice and mask in pair " + std::to_string(i));
        if (!pairs[i].slice.same_shape(pairs[0].slice))
            throw Error("train_segmenter", "pair " + std::to_string(i) + " differs in shape from pair 0");
    }

    // Held-out split.
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<MaskPair> train, held;
    if (pairs.size() >= 5 && seg_config.holdout_fraction > 0.0) {
        Rng rng = Rng::substream(config.seed, 0x5E6);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        auto n_held = static_cast<std::size_t>(std::llround(seg_config.holdout_fraction * static_cast<double>(pairs.size())));
        n_held = std::clamp<std::size_t>(n_held, 1, pairs.size() - 1);
        for (std::size_t i = 0; i < order.size(); ++i) (i < n_held ? held : train).push_back(pairs[order[i]]);
    } else {
        train = pairs;
    }

    configure_determinism(config.deterministic);
    torch::manual_seed(config.seed);
    SegmenterTrained out;
    out.model.config = seg_config;
    out.model.net = AttentionUNet(seg_config.depth, seg_config.base_channels);
    if (!seg_config.auto_pad) {
        const std::int64_t m = std::int64_t{1} << seg_config.depth;
        if (pairs[0].slice.height % m || pairs[0].slice.width % m)
            throw Error("train_segmenter", "slice size is not divisible by " + std::to_string(m) + " and auto-pad is off");
    }

    std::vector<Tensor> xs, ys;
    for (const auto& p : train) {
        xs.push_back(prepared_input(p.slice, seg_config));
        ys.push_back(prepared_mask(p.mask, seg_config));
    }

    auto& net = out.model.net;
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(config.lr0));
    const auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = lr_at_epoch(config, epoch);
        for (auto& g : opt.param_groups()) g.options().set_lr(lr);
        Rng rng = Rng::substream(config.effective_shuffle_seed(), static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> idx(xs.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);

        net->train();
        double loss_sum = 0.0;
        const auto bs = static_cast<std::size_t>(config.batch_size);
        for (std::size_t s = 0, b = 0; s < idx.size(); s += bs, ++b) {
            std::vector<Tensor> bx, by;
            for (std::size_t i = s; i < std::min(idx.size(), s + bs); ++i) {
                bx.push_back(xs[idx[i]]);
                by.push_back(ys[idx[i]]);
            }
            const Tensor x = torch::stack(bx), y = torch::stack(by);
            opt.zero_grad();
            const Tensor logits = net->forward(x);
            const Tensor bce = torch::binary_cross_entropy_with_logits(logits, y);
            const Tensor p = torch::sigmoid(logits);
            const Tensor soft_dice = (2.0 * (p * y).sum() + 1.0) / (p.sum() + y.sum() + 1.0);
            const Tensor loss = bce + (1.0 - soft_dice);
            const double value = loss.item<double>();
            if (!std::isfinite(value))
                throw Error("train_segmenter",
                            "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
            loss.backward();
            opt.step();
            loss_sum += value * static_cast<double>(bx.size());
        }
        HistoryRow row;
        row.epoch = epoch;
        row.loss = loss_sum / static_cast<double>(xs.size());
        row.lr = lr;
        row.train_metric = mean_dice(out.model, train);
        if (!held.empty()) row.val_metric = mean_dice(out.model, held);
        out.history.rows.push_back(row);
        out.meta.final_loss = row.loss;
    }
    out.history.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    net->eval();

    const auto& eval_set = held.empty() ? train : held;
    out.heldout_dice = mean_dice(out.model, eval_set);
    out.n_heldout = held.size();
    out.meta.architecture = {{"kind", "attention-unet"}, {"depth", seg_config.depth}, {"base_channels", seg_config.base_channels}};
    out.meta.task = "seg";
    out.meta.seed = config.seed;
    out.meta.epoch = config.epochs - 1;
    out.meta.set_config(config.to_json());
    out.meta.extras["segmentation"] = seg_config.to_json();
    out.meta.extras["dice"] = out.heldout_dice;
    out.meta.extras["dice_split"] = held.empty() ? "train" : "heldout";
    out.meta.extras["n_dice_pairs"] = eval_set.size();
    return out;
}

std::vector<MaskPair> load_mask_pairs(const std::filesystem::path& csv_path) {
    const auto lines = io::read_lines(csv_path);
    if (lines.empty() || lines[0] != "slice_path,mask_path")
        throw Error("load_mask_pairs", "header must be 'slice_path,mask_path'");
    const auto base = csv_path.parent_path();
    std::vector<MaskPair> out;
    for (std::size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].empty()) continue;
        const auto f = io::split_csv_line(lines[r]);
        if (f.size() != 2) throw Error("load_mask_pairs", "row " + std::to_string(r) + ": expected 2 fields");
        auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };
        MaskPair pair{io::read_png_gray(resolve(f[0])), io::read_png_mask(resolve(f[1]))};
        if (!pair.mask.same_shape(pair.slice))
            throw Error("load_mask_pairs", "row " + std::to_string(r) + ": mask shape differs from slice");
        out.push_back(std::move(pair));
    }
    return out;
}

void save_segmenter(SegmenterTrained& trained, const std::filesystem::path& stem) {
    save_checkpoint(*trained.model.net, trained.meta, stem);
}

SegmentationModel load_segmenter(const std::filesystem::path& stem) {
    const CheckpointMeta meta = read_checkpoint_meta(stem);
    if (meta.task != "seg")
        throw Error("segmentation", "checkpoint '" + stem.string() + "' is a " + meta.task + " model, not a segmenter");
    SegmentationModel m;
    m.config = SegmentationConfig::from_json(meta.extras.value("segmentation", nlohmann::json::object()));
    m.net = AttentionUNet(m.config.depth, m.config.base_channels);
    load_checkpoint_weights(*m.net, stem);
    m.net->eval();
    return m;
}

}  // namespace cov3d
