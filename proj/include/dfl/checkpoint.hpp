#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dfl/common.hpp"
#include "dfl/config.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Versioned checkpoint archives. Layout:
//
//   DFLARCH 1\n
//   <key = value metadata lines>
//   ---\n
//   per tensor: "name n c h w\n" followed by n*c*h*w little-endian float32
//
// One format serves kernel banks, network checkpoints and the feature
// extractor; `kind` in the metadata says which. Values quantize to float32
// on save, so save -> load -> save is byte-stable.
// ---------------------------------------------------------------------------

struct Archive {
    KeyValueConfig meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    static constexpr const char* kMagic = "DFLARCH 1";

    void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw DataError("archive has no tensor named " + name);
    }
    bool has_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint: " + path);
        out << kMagic << "\n" << meta.text() << "---\n";
        for (const auto& [name, t] : tensors) {
            out << name << " " << t.n << " " << t.c << " " << t.h << " " << t.w << "\n";
            std::vector<unsigned char> bytes(t.v.size() * 4);
            for (size_t i = 0; i < t.v.size(); ++i) {
                const float f = static_cast<float>(t.v[i]);
                uint32_t u;
                std::memcpy(&u, &f, 4);
                bytes[4 * i + 0] = static_cast<unsigned char>(u & 0xff);
                bytes[4 * i + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
                bytes[4 * i + 2] = static_cast<unsigned char>((u >> 16) & 0xff);
                bytes[4 * i + 3] = static_cast<unsigned char>((u >> 24) & 0xff);
            }
            out.write(reinterpret_cast<const char*>(bytes.data()),
                      static_cast<std::streamsize>(bytes.size()));
        }
        if (!out) throw DataError("short write on checkpoint: " + path);
    }

    static Archive load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open checkpoint: " + path);
        std::string line;
        if (!std::getline(in, line) || line != kMagic)
            throw DataError(path + ": not a defocuslab checkpoint (bad magic)");
        std::string meta_text;
        while (std::getline(in, line)) {
            if (line == "---") break;
            meta_text += line;
            meta_text += "\n";
        }
        Archive a;
        a.meta = KeyValueConfig::parse_text(meta_text, path);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream hdr(line);
            std::string name;
            int n, c, h, w;
            if (!(hdr >> name >> n >> c >> h >> w))
                throw DataError(path + ": malformed tensor header: " + line);
            Tensor t(n, c, h, w);
            std::vector<unsigned char> bytes(t.v.size() * 4);
            in.read(reinterpret_cast<char*>(bytes.data()),
                    static_cast<std::streamsize>(bytes.size()));
            if (!in) throw DataError(path + ": truncated tensor data for " + name);
            for (size_t i = 0; i < t.v.size(); ++i) {
                const uint32_t u = static_cast<uint32_t>(bytes[4 * i]) |
                                   (static_cast<uint32_t>(bytes[4 * i + 1]) << 8) |
                                   (static_cast<uint32_t>(bytes[4 * i + 2]) << 16) |
                                   (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
                float f;
                std::memcpy(&f, &u, 4);
                t.v[i] = static_cast<double>(f);
            }
            a.tensors.emplace_back(name, std::move(t));
        }
        return a;
    }
};

}  // namespace dfl
