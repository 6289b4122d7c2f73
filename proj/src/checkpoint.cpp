#include "npad/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "npad/errors.hpp"

namespace npad {

namespace {

constexpr const char* kFormat = "npad-checkpoint";
constexpr const char* kDtype = "f64le";

void append_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& metadata) {
    nlohmann::json header;
    header["format"] = kFormat;
    header["version"] = 1;
    header["dtype"] = kDtype;
    header["tensors"] = nlohmann::json::array();
    for (const auto& p : params) {
        header["tensors"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
    }
    header["metadata"] = metadata;

    std::string out = header.dump();
    out.push_back('\n');
    out.reserve(out.size() + params.scalar_count() * 8);
    for (const auto& p : params) {
        for (double v : p.value.data()) append_le(out, v);
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) throw ParseError("checkpoint: missing header terminator");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, newline));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header: ") + e.what());
    }
    if (header.value("format", "") != kFormat || header.value("dtype", "") != kDtype) {
        throw ParseError("checkpoint: unsupported format or dtype");
    }
    Checkpoint ck;
    ck.metadata = header.value("metadata", nlohmann::json::object());
    std::size_t offset = newline + 1;
    for (const auto& t : header.at("tensors")) {
        const Shape shape = t.at("shape").get<Shape>();
        const std::size_t n = shape_volume(shape);
        if (offset + n * 8 > bytes.size()) throw ParseError("checkpoint: truncated payload");
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = read_le(bytes.data() + offset + 8 * i);
        offset += n * 8;
        ck.params.add(t.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
    if (offset != bytes.size()) throw ParseError("checkpoint: trailing bytes after payload");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const nlohmann::json& metadata) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    const std::string bytes = encode_checkpoint(params, metadata);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

}  // namespace npad
