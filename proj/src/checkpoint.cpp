#include "prompt_pet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace prompt_pet {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'E', 'T', 'A', 'R', 'R', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("truncated array file");
    return v;
}

}  // namespace

void save_arrays(const std::filesystem::path& path, const ArrayMap& arrays) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint64_t>(os, arrays.size());
    for (const auto& [name, m] : arrays) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint64_t>(os, m.rows());
        put<std::uint64_t>(os, m.cols());
        os.write(reinterpret_cast<const char*>(m.values().data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

ArrayMap load_arrays(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 8, kMagic)) {
        throw std::runtime_error("not an array file: " + path.string());
    }
    const auto count = get<std::uint64_t>(is);
    ArrayMap out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto rows = get<std::uint64_t>(is);
        const auto cols = get<std::uint64_t>(is);
        std::vector<double> data(rows * cols);
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("truncated array file: " + path.string());
        out.emplace(std::move(name), Matrix(rows, cols, std::move(data)));
    }
    return out;
}

ArrayMap collect_arrays(std::span<Parameter* const> params) {
    ArrayMap out;
    for (const Parameter* p : params) {
        if (!out.emplace(p->name, p->value).second) {
            throw std::logic_error("duplicate parameter name " + p->name);
        }
    }
    return out;
}

void assign_arrays(std::span<Parameter* const> params, const ArrayMap& arrays) {
    for (Parameter* p : params) {
        auto it = arrays.find(p->name);
        if (it == arrays.end()) {
            throw std::runtime_error("checkpoint is missing array " + p->name);
        }
        if (!it->second.same_shape(p->value)) {
            throw std::runtime_error("checkpoint array " + p->name + " has the wrong shape");
        }
        p->value = it->second;
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace prompt_pet
