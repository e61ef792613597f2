#include "steerlab/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "steerlab/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive i/o assumes a little-endian host");

namespace steerlab {

namespace {

constexpr char kMagic[6] = {'S', 'T', 'L', 'B', '1', '\0'};

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw FormatError("archive: truncated file");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

uint32_t crc32(const void* data, size_t n, uint32_t seed) {
    static const auto table = make_crc_table();
    uint32_t c = seed ^ 0xffffffffu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

void save_tensors(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    std::string payloads;
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw FormatError("archive: tensor name too long");
        put<uint16_t>(out, static_cast<uint16_t>(name.size()));
        out.append(name);
        put<uint8_t>(out, 0); // f32
        put<uint8_t>(out, static_cast<uint8_t>(t.rank()));
        for (int d : t.shape) put<uint32_t>(out, static_cast<uint32_t>(d));
        const char* raw = reinterpret_cast<const char*>(t.data.data());
        out.append(raw, t.data.size() * sizeof(float));
        payloads.append(raw, t.data.size() * sizeof(float));
    }
    put<uint32_t>(out, crc32(payloads.data(), payloads.size()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("archive: cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("archive: write failed: " + path);
}

std::map<std::string, Tensor> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("archive: cannot open: " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("archive: bad magic in " + path);
    pos = sizeof(kMagic);
    const auto count = take<uint32_t>(in, pos);
    std::map<std::string, Tensor> out;
    std::string payloads;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = take<uint16_t>(in, pos);
        if (pos + name_len > in.size()) throw FormatError("archive: truncated name");
        std::string name(in.data() + pos, name_len);
        pos += name_len;
        const auto dtype = take<uint8_t>(in, pos);
        if (dtype != 0) throw FormatError("archive: unsupported dtype code " + std::to_string(dtype));
        const auto rank = take<uint8_t>(in, pos);
        Shape shape;
        size_t numel = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            const auto d = take<uint32_t>(in, pos);
            shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        if (pos + numel * sizeof(float) > in.size()) throw FormatError("archive: truncated payload");
        Tensor t(shape);
        std::memcpy(t.data.data(), in.data() + pos, numel * sizeof(float));
        payloads.append(in.data() + pos, numel * sizeof(float));
        pos += numel * sizeof(float);
        out.emplace(std::move(name), std::move(t));
    }
    const auto stored_crc = take<uint32_t>(in, pos);
    if (stored_crc != crc32(payloads.data(), payloads.size()))
        throw FormatError("archive: payload CRC mismatch in " + path);
    return out;
}

void save_weights(const std::string& path, const WeightStore& store) {
    save_tensors(path, store);
}

WeightStore load_weights(const std::string& path, const ModelConfig& cfg) {
    WeightStore store = load_tensors(path);
    check_store_matches(store, cfg);
    return store;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("missing file: " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(in.data(), in.size());
}

} // namespace steerlab
