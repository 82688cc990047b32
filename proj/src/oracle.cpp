#include "sagekeep/oracle.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sagekeep/io.hpp"
#include "sagekeep/rng.hpp"

namespace sagekeep {

void validate_oracle(const OracleNet& net) {
    if (net.layers.empty()) throw DataError("oracle: no layers");
    if (net.num_classes < 2) throw DataError("oracle: num_classes must be >= 2");
    if (net.params.size() != net.layers.size())
        throw DataError("oracle: " + std::to_string(net.params.size()) + " parameter sets for " +
                        std::to_string(net.layers.size()) + " layers");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& spec = net.layers[i];
        if (i > 0 && spec.in_channels != net.layers[i - 1].out_channels)
            throw DataError("oracle: layer " + std::to_string(i) + " expects " +
                            std::to_string(spec.in_channels) + " channels, previous emits " +
                            std::to_string(net.layers[i - 1].out_channels));
        const auto& p = net.params[i];
        const std::vector<std::size_t> wshape{spec.out_channels, spec.in_channels, spec.kernel,
                                              spec.kernel};
        if (p.weight.shape() != wshape)
            throw DataError("oracle: layer " + std::to_string(i) + " weight shape " +
                            p.weight.shape_str() + " does not match spec");
        if (p.bias.shape() != std::vector<std::size_t>{spec.out_channels})
            throw DataError("oracle: layer " + std::to_string(i) + " bias shape mismatch");
    }
    if (net.layers.back().out_channels != net.num_classes)
        throw DataError("oracle: final layer emits " +
                        std::to_string(net.layers.back().out_channels) + " channels, expected " +
                        std::to_string(net.num_classes) + " classes");
}

OracleNet make_oracle(const std::string& id, std::size_t in_channels, std::size_t num_classes,
                      std::uint64_t init_seed, std::size_t hidden, std::size_t depth,
                      std::size_t kernel) {
    if (depth < 1) throw DataError("make_oracle: depth must be >= 1");
    OracleNet net;
    net.id = id;
    net.num_classes = num_classes;
    Rng rng(derive_seed(init_seed, "oracle-init"));
    for (std::size_t i = 0; i < depth; ++i) {
        LayerSpec spec;
        spec.in_channels = i == 0 ? in_channels : hidden;
        spec.out_channels = i + 1 == depth ? num_classes : hidden;
        spec.kernel = kernel;
        spec.activation = i + 1 == depth ? Activation::None : Activation::Relu;
        net.layers.push_back(spec);

        const double fan_in =
            static_cast<double>(spec.in_channels) * static_cast<double>(kernel * kernel);
        const double stddev = std::sqrt(2.0 / fan_in);
        std::vector<double> w(spec.out_channels * spec.in_channels * kernel * kernel);
        for (auto& v : w) v = rng.normal(0.0, stddev);
        ConvParams p;
        p.weight = Tensor::from_data({spec.out_channels, spec.in_channels, kernel, kernel},
                                     std::move(w));
        p.bias = Tensor::zeros({spec.out_channels});
        net.params.push_back(std::move(p));
    }
    validate_oracle(net);
    return net;
}

OracleNet make_default_oracle(char variant, std::size_t in_channels, std::size_t num_classes) {
    switch (variant) {
        case 'A':
        case 'a':
            return make_oracle("oracle-A", in_channels, num_classes, 0xA11CE5EEDull);
        case 'B':
        case 'b':
            return make_oracle("oracle-B", in_channels, num_classes, 0xB0BB5EEDull);
        default:
            throw DataError(std::string("make_default_oracle: unknown variant '") + variant +
                            "'");
    }
}

Tensor forward_with_params(const OracleNet& net, const std::vector<ConvParams>& params,
                           const Tensor& x) {
    if (x.rank() != 3) throw DataError("oracle forward: input must be CxHxW, got " + x.shape_str());
    if (x.shape()[0] != net.layers.front().in_channels)
        throw DataError("oracle forward: input has " + std::to_string(x.shape()[0]) +
                        " channels, net expects " +
                        std::to_string(net.layers.front().in_channels));
    if (params.size() != net.layers.size())
        throw DataError("oracle forward: parameter count mismatch");
    Tensor h = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        h = conv2d(h, params[i].weight, params[i].bias);
        if (net.layers[i].activation == Activation::Relu) h = relu(h);
    }
    return h;
}

Tensor forward(const OracleNet& net, const Tensor& x) {
    validate_oracle(net);
    return forward_with_params(net, net.params, x);
}

InputGradient input_gradient(const OracleNet& net, const Tensor& x, const Tensor& y,
                             double lambda_ce, double lambda_dice) {
    if (!net.frozen) throw DataError("input_gradient: oracle must be frozen");
    validate_oracle(net);
    Tape tape;
    Tensor xt = tape.leaf(x);
    Tensor logits = forward_with_params(net, net.params, xt);
    SegLosses losses = seg_losses(logits, y);
    Tensor loss = add(scalar_mul(losses.ce, lambda_ce), scalar_mul(losses.soft_dice, lambda_dice));
    Gradients grads = backward(tape, loss);
    return InputGradient{loss.value(), grads.wrt(xt)};
}

// ---- serialization ----

namespace {

constexpr const char* kFormatTag = "sagekeep-oracle-v1";

std::string activation_name(Activation a) { return a == Activation::Relu ? "relu" : "none"; }

Activation activation_from(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "none") return Activation::None;
    throw DataError("oracle weights: unknown activation '" + s + "'");
}

}  // namespace

void save_weights(const OracleNet& net, const std::string& path) {
    validate_oracle(net);
    std::vector<std::uint8_t> blobs;
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& spec = net.layers[i];
        nlohmann::json layer;
        layer["in"] = spec.in_channels;
        layer["out"] = spec.out_channels;
        layer["kernel"] = spec.kernel;
        layer["activation"] = activation_name(spec.activation);
        layer["weight_offset"] = blobs.size();
        auto wb = encode_kct1(net.params[i].weight);
        blobs.insert(blobs.end(), wb.begin(), wb.end());
        layer["bias_offset"] = blobs.size();
        auto bb = encode_kct1(net.params[i].bias);
        blobs.insert(blobs.end(), bb.begin(), bb.end());
        layers.push_back(std::move(layer));
    }
    nlohmann::json desc;
    desc["format"] = kFormatTag;
    desc["id"] = net.id;
    desc["num_classes"] = net.num_classes;
    desc["num_layers"] = net.layers.size();
    desc["layers"] = std::move(layers);
    const std::string json_text = desc.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open file for writing: " + path);
    const std::uint32_t len = static_cast<std::uint32_t>(json_text.size());
    std::uint8_t lenb[4] = {static_cast<std::uint8_t>(len & 0xff),
                            static_cast<std::uint8_t>((len >> 8) & 0xff),
                            static_cast<std::uint8_t>((len >> 16) & 0xff),
                            static_cast<std::uint8_t>((len >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(lenb), 4);
    out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
    out.write(reinterpret_cast<const char*>(blobs.data()),
              static_cast<std::streamsize>(blobs.size()));
    if (!out) throw DataError("write failed: " + path);
}

OracleNet load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 4) throw DataError("oracle weights " + path + ": truncated at offset 0");
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
    if (bytes.size() < 4ull + len)
        throw DataError("oracle weights " + path + ": descriptor truncated at offset 4");
    nlohmann::json desc;
    try {
        desc = nlohmann::json::parse(bytes.begin() + 4, bytes.begin() + 4 + len);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("oracle weights " + path + ": bad descriptor: " + e.what());
    }
    if (!desc.contains("format") || desc["format"] != kFormatTag)
        throw DataError("oracle weights " + path + ": bad magic/format tag at offset 4");

    OracleNet net;
    net.id = desc.value("id", std::string{});
    net.num_classes = desc.at("num_classes").get<std::size_t>();
    const auto& layers = desc.at("layers");
    if (desc.at("num_layers").get<std::size_t>() != layers.size())
        throw DataError("oracle weights " + path + ": descriptor num_layers " +
                        std::to_string(desc.at("num_layers").get<std::size_t>()) +
                        " != layer list size " + std::to_string(layers.size()));

    const std::size_t blob_base = 4ull + len;
    auto blob_at = [&](std::size_t rel_offset) {
        if (blob_base + rel_offset > bytes.size())
            throw DataError("oracle weights " + path + ": blob offset " +
                            std::to_string(rel_offset) + " beyond file end");
        std::vector<std::uint8_t> tail(bytes.begin() +
                                           static_cast<std::ptrdiff_t>(blob_base + rel_offset),
                                       bytes.end());
        // KCT1 decoding tolerates trailing bytes only if we trim first; read
        // the header to learn the exact blob length.
        if (tail.size() < 5) throw DataError("oracle weights " + path + ": truncated blob");
        const std::uint8_t rank = tail[4];
        std::size_t numel = 1, header = 5 + 4ull * rank;
        if (tail.size() < header) throw DataError("oracle weights " + path + ": truncated blob");
        for (std::uint8_t i = 0; i < rank; ++i) {
            std::uint32_t d = 0;
            for (int b = 0; b < 4; ++b)
                d |= static_cast<std::uint32_t>(tail[5 + 4ull * i + b]) << (8 * b);
            numel *= d;
        }
        const std::size_t total = header + 8ull * numel;
        if (tail.size() < total)
            throw DataError("oracle weights " + path + ": blob truncated at offset " +
                            std::to_string(blob_base + rel_offset));
        tail.resize(total);
        return decode_kct1(tail);
    };

    for (const auto& layer : layers) {
        LayerSpec spec;
        spec.in_channels = layer.at("in").get<std::size_t>();
        spec.out_channels = layer.at("out").get<std::size_t>();
        spec.kernel = layer.at("kernel").get<std::size_t>();
        spec.activation = activation_from(layer.at("activation").get<std::string>());
        net.layers.push_back(spec);
        ConvParams p;
        p.weight = blob_at(layer.at("weight_offset").get<std::size_t>());
        p.bias = blob_at(layer.at("bias_offset").get<std::size_t>());
        net.params.push_back(std::move(p));
    }
    net.frozen = true;
    validate_oracle(net);
    return net;
}

std::uint64_t weights_hash(const OracleNet& net) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const Tensor& t) {
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ull;
            }
        }
    };
    for (const auto& p : net.params) {
        mix(p.weight);
        mix(p.bias);
    }
    return h;
}

}  // namespace sagekeep
