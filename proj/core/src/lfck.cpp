#include "layerforge/lfck.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace layerforge::lfck {

static_assert(std::endian::native == std::endian::little,
              "LFCK writer assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'L', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

std::string build_header(const Container& c) {
    json header;
    json cfg = json::parse(c.config_json, nullptr, false);
    if (cfg.is_discarded() || !cfg.is_object()) {
        throw FormatError("LFCK config block is not a JSON object");
    }
    header["config"] = cfg;
    json tensors = json::array();
    int64_t offset = 0;
    for (const auto& nt : c.tensors) {
        json t;
        t["name"] = nt.name;
        t["shape"] = nt.tensor.shape();
        t["offset"] = offset;
        const int64_t nbytes = nt.tensor.numel() * 4;
        t["nbytes"] = nbytes;
        tensors.push_back(std::move(t));
        offset += nbytes;
    }
    header["tensors"] = std::move(tensors);
    return header.dump();
}

}  // namespace

const Tensor* Container::find(const std::string& name) const {
    for (const auto& nt : tensors) {
        if (nt.name == name) return &nt.tensor;
    }
    return nullptr;
}

int64_t container_file_size(const Container& c) {
    int64_t data = 0;
    for (const auto& nt : c.tensors) data += nt.tensor.numel() * 4;
    return 16 + static_cast<int64_t>(build_header(c).size()) + data;
}

void write_container(const std::filesystem::path& path, const Container& c) {
    const std::string header = build_header(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());

    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& nt : c.tensors) {
        out.write(reinterpret_cast<const char*>(nt.tensor.data()),
                  static_cast<std::streamsize>(nt.tensor.numel() * 4));
    }
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad magic in " + path.string());
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (!in || version != kVersion) {
        throw FormatError("unsupported LFCK version " + std::to_string(version) + " in " +
                          path.string());
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || hlen == 0 || hlen > (1ULL << 31)) {
        throw FormatError("implausible header length in " + path.string());
    }
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated header in " + path.string());

    json h = json::parse(header, nullptr, false);
    if (h.is_discarded() || !h.is_object() || !h.contains("config") || !h.contains("tensors")) {
        throw FormatError("malformed LFCK header in " + path.string());
    }

    Container c;
    c.config_json = h["config"].dump();
    int64_t expect_offset = 0;
    for (const auto& t : h["tensors"]) {
        if (!t.contains("name") || !t.contains("shape") || !t.contains("offset") ||
            !t.contains("nbytes")) {
            throw FormatError("tensor entry missing fields in " + path.string());
        }
        NamedTensor nt;
        nt.name = t["name"].get<std::string>();
        std::vector<int64_t> shape = t["shape"].get<std::vector<int64_t>>();
        const int64_t numel = shape_numel(shape);
        const int64_t nbytes = t["nbytes"].get<int64_t>();
        const int64_t offset = t["offset"].get<int64_t>();
        if (nbytes != numel * 4) {
            throw FormatError("tensor '" + nt.name + "' nbytes disagrees with shape in " +
                              path.string());
        }
        if (offset != expect_offset) {
            throw FormatError("tensor '" + nt.name + "' is not contiguous in " + path.string());
        }
        expect_offset += nbytes;

        std::vector<float> data(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(data.data()), nbytes);
        if (!in) throw IoError("truncated tensor data for '" + nt.name + "' in " + path.string());
        nt.tensor = Tensor::from_data(std::move(shape), std::move(data));
        c.tensors.push_back(std::move(nt));
    }
    return c;
}

}  // namespace layerforge::lfck
