#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sceneseg/model.hpp"
#include "sceneseg/scene.hpp"

// Raster and model persistence: PNG (8/16-bit) and uncompressed TIFF scene
// loading with per-band z-score normalization, palette-encoded segmentation
// maps, reference-mask decoding, and the bit-exact model file format.

namespace sceneseg {

struct PaletteEntry {
    std::string name;
    std::array<uint8_t, 3> rgb;
};

struct Palette {
    std::vector<PaletteEntry> entries;

    size_t size() const { return entries.size(); }
    /// Index of the entry with this exact color, or -1.
    int find_color(uint8_t r, uint8_t g, uint8_t b) const;
    int find_name(const std::string& name) const;
    void validate() const;  // throws ConfigError on duplicate colors
};

/// ISPRS-style six classes with the conventional legend colors.
Palette default_palette();

/// Fixed 8-entry palette used to render raw cluster ids when no
/// cluster-to-class mapping is available; colors chosen to be distinguishable.
Palette fallback_palette();

/// Parses a JSON array of {"name": ..., "rgb": [r, g, b]}.
Palette load_palette(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// raster I/O
// ---------------------------------------------------------------------------

/// Decoded image: interleaved row-major samples, 8- or 16-bit stored in u16.
struct RawImage {
    size_t height = 0;
    size_t width = 0;
    size_t channels = 0;
    unsigned bit_depth = 8;  // 8 or 16
    std::vector<uint16_t> pixels;

    uint16_t at(size_t row, size_t col, size_t ch) const {
        return pixels[(row * width + col) * channels + ch];
    }
};

/// Reads a PNG or uncompressed TIFF (sniffed by signature, not extension).
RawImage read_image(const std::filesystem::path& path);

void write_png8(const std::filesystem::path& path, size_t height, size_t width, size_t channels,
                const std::vector<uint8_t>& interleaved);
void write_png16(const std::filesystem::path& path, size_t height, size_t width, size_t channels,
                 const std::vector<uint16_t>& interleaved);
/// Chunky little-endian baseline TIFF, compression 1.
void write_tiff(const std::filesystem::path& path, size_t height, size_t width, size_t channels,
                unsigned bit_depth, const std::vector<uint16_t>& interleaved);

/// Loads a raster as a channels-first fp32 scene. With normalize set, each
/// band is z-scored with scene-wide statistics; a constant band becomes all
/// zeros. Raw per-band stats are kept on the scene either way.
Scene load_scene(const std::filesystem::path& path, bool normalize = true);

/// Converts an in-memory raw image to a Scene (same normalization rules).
Scene scene_from_image(const RawImage& image, bool normalize);

/// Undoes the z-score using the stored stats.
Scene denormalize(const Scene& scene);

/// Renders labels to an 8-bit RGB PNG. With a cluster-to-class mapping every
/// cluster present in the map must be covered and is colored by its class's
/// palette entry; without one, clusters index the fixed fallback palette.
void write_segmentation(const SegmentationMap& map, const Palette& palette,
                        const std::optional<std::vector<int32_t>>& cluster_to_class,
                        const std::filesystem::path& path);

/// Decodes an RGB image into class indices by exact palette-color match.
/// Colors outside the palette become the ignore sentinel; a result with more
/// than half its pixels ignored carries a warning flag.
ReferenceMap read_reference(const std::filesystem::path& path, const Palette& palette);

// ---------------------------------------------------------------------------
// model files
// ---------------------------------------------------------------------------

inline constexpr std::array<uint8_t, 4> kModelMagic = {0x53, 0x53, 0x45, 0x47};  // "SSEG"
inline constexpr uint32_t kModelVersion = 1;

/// Little-endian layout: magic, version u32, K u32, r u32, seed u64, config
/// digest u64, stats-initialized u32, then every tensor in the fixed layer
/// order as rank u32, dims u32 each, fp32 payload. Round-trips bit-exactly.
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace sceneseg
