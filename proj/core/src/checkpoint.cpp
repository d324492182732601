#include "cortisphere/checkpoint.hpp"

#include <sstream>

#include "cortisphere/binary_io.hpp"
#include "cortisphere/error.hpp"

namespace cortisphere {
namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};

std::string encode_config(const std::map<std::string, std::string>& config) {
    std::string out;
    for (const auto& [k, v] : config) out += k + "=" + v + "\n";
    return out;
}

std::map<std::string, std::string> decode_config(const std::string& text, const std::string& source) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError(source + ": malformed config line '" + line + "'");
        out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

} // namespace

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint) {
    io::ByteWriter w;
    w.put_bytes(kMagic, 4);
    w.put(Checkpoint::kVersion);
    w.put_string(checkpoint.kind);
    w.put_string(encode_config(checkpoint.config));
    w.put(static_cast<std::uint32_t>(checkpoint.arrays.size()));
    for (const auto& [name, m] : checkpoint.arrays) {
        const std::size_t start = w.size();
        w.put_string(name);
        w.put(static_cast<std::uint32_t>(m.rows()));
        w.put(static_cast<std::uint32_t>(m.cols()));
        w.put_bytes(m.data(), m.size() * sizeof(double));
        w.put(io::crc32(w.bytes().data() + start, w.size() - start));
    }
    return w.bytes();
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    const auto* magic = r.take(4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagicError(source + ": not a checkpoint file");
    const auto version = r.get<std::uint32_t>();
    if (version != Checkpoint::kVersion)
        throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint out;
    out.kind = r.get_string();
    out.config = decode_config(r.get_string(), source);
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t start = r.position();
        std::string name = r.get_string();
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        const std::size_t n = static_cast<std::size_t>(rows) * cols;
        if (n > r.remaining() / sizeof(double))
            throw TruncationError(source + ": array '" + name + "' runs past end of file");
        std::vector<double> values(n);
        std::memcpy(values.data(), r.take(n * sizeof(double)), n * sizeof(double));
        const std::uint32_t expected = io::crc32(r.data() + start, r.position() - start);
        if (r.get<std::uint32_t>() != expected) throw ChecksumError(source + ": checksum mismatch in array '" + name + "'");
        out.arrays.add(std::move(name), Matrix(rows, cols, std::move(values)));
    }
    if (r.remaining() != 0) throw IoError(source + ": trailing bytes after last array");
    return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    io::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path), path); }

} // namespace cortisphere
