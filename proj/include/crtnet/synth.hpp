#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crtnet/image.hpp"
#include "crtnet/rng.hpp"

namespace crtnet {

enum class RoomKind { Kitchen, Bathroom, Bedroom, Study, Living };
inline constexpr int kRoomKinds = 5;
std::string to_string(RoomKind room);

/// Thin slab whose top edge is a horizontal support surface; kinds differ in styling.
enum class SupportKind { Counter, Shelf, Table, Cabinet };
inline constexpr int kSupportKinds = 4;
std::string to_string(SupportKind kind);

enum class ConditionTag {
  Normal,
  NoContextGrey,
  NoContextSaltPepper,
  Gravity,
  CoOccur,
  CoOccurGravity,
  Size2,
  Size3,
  Size4,
};
inline constexpr int kConditionTags = 9;
std::string to_string(ConditionTag tag);
ConditionTag parse_condition(const std::string& name);
const std::vector<ConditionTag>& all_conditions();

enum class SizeBin { Small, Large };
std::string to_string(SizeBin bin);
SizeBin parse_size_bin(const std::string& name);

/// 8×8 stencil of palette indices; every cell is opaque.
struct Glyph {
  std::array<std::uint8_t, 64> cells{};
  std::vector<Rgb> palette;
};

struct ClassDef {
  int class_id = 0;
  std::string name;
  Glyph glyph;
  std::vector<RoomKind> home_rooms;
  SupportKind support = SupportKind::Table;  // the surface it usually rests on
  int base_size = 16;                        // pixels at the default 96 px image
  bool support_required = true;
};

/// Built-in roster of eight classes. Classes 0/1 and 2/3 are ambiguous pairs:
/// same glyph and base size, disjoint home rooms, different usual supports.
const std::vector<ClassDef>& default_classes();
/// Partner class id of an ambiguous-pair member, or -1.
int ambiguous_partner(const std::vector<ClassDef>& classes, int class_id);
bool is_ambiguous(const std::vector<ClassDef>& classes, int class_id);

struct RoomPalette {
  Rgb wall{}, accent{}, floor{};
  int pattern = 0;  // 0 plain, 1 grid tiles, 2 vertical stripes, 3 dots, 4 wainscot
};
RoomPalette room_palette(RoomKind room);

struct Furniture {
  SupportKind kind = SupportKind::Table;
  BoundingBox rect;  // slab extent; surface y is rect.y
  Rgb color{};
  int surface_y() const { return rect.y; }
};

struct SceneConfig {
  int image_size = 96;
  double lift_fraction = 0.125;
  double center_jitter = 0.1;
  int small_threshold = 20;         // small when the longer box side is below this
  double room_cue_prob = 0.5;       // room decor visible (else a neutral palette)
  double support_cue_prob = 0.9;    // target on its usual support kind (else a random kind)
  double size_jitter = 0.08;
  int max_attempts = 100;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static SceneConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const SceneConfig&) const = default;

  int floor_y() const;
  int lift_pixels() const;
};

/// Everything needed to render a scene: background layout plus the target.
struct Scene {
  RoomKind room = RoomKind::Kitchen;
  bool decor_visible = true;
  RoomPalette palette;
  std::vector<Furniture> furniture;
  int support_index = -1;  // furniture piece under the target (-1 if none)
  int class_id = 0;
  BoundingBox target;
  bool clamped = false;    // a transform had to clamp the placement

  Image render_background(const SceneConfig& config) const;
  Image render(const SceneConfig& config, const std::vector<ClassDef>& classes) const;
  /// True when the target's bottom edge lies on some surface within its x-range.
  bool target_supported() const;
};

void draw_glyph(Image& image, const Glyph& glyph, const BoundingBox& box);

struct SceneOptions {
  std::optional<RoomKind> room;          // force the room kind
  std::optional<double> target_center_y; // force the resting target centre
};

/// Scene in one of the class's home rooms (unless options.room is set), target
/// resting on a support surface near the image centre. Throws GenerationError
/// if no non-overlapping layout is found.
Scene generate_base_scene(Rng& rng, int class_id, const SceneConfig& config,
                          const std::vector<ClassDef>& classes, const SceneOptions& options = {});

/// Target raised by lift_fraction × room height.
Scene apply_gravity(const Scene& scene, const SceneConfig& config);
/// A room kind outside the class's home rooms, uniformly. Throws
/// ConditionUnavailableError if every room is a home room.
RoomKind apply_cooccurrence(int class_id, Rng& rng, const std::vector<ClassDef>& classes);
/// Non-home room with the target hovering, vertical centre at half height.
Scene apply_cooccur_gravity(int class_id, Rng& rng, const SceneConfig& config,
                            const std::vector<ClassDef>& classes);
/// Resting counterpart of apply_cooccur_gravity for the same rng state.
Scene cooccur_gravity_resting(int class_id, Rng& rng, const SceneConfig& config,
                              const std::vector<ClassDef>& classes);
/// Target rescaled about its bottom-centre anchor.
Scene apply_size(const Scene& scene, int factor, const SceneConfig& config);

enum class BlankMode { Grey, SaltPepper };
/// Replaces every pixel outside the box.
Image blank_context(const Image& image, const BoundingBox& box, BlankMode mode, Rng& rng);

struct Sample {
  Image image;
  BoundingBox box;
  int class_id = 0;
  ConditionTag condition = ConditionTag::Normal;
  SizeBin size_bin = SizeBin::Small;
  std::uint64_t seed = 0;
  Scene scene;
};

SizeBin size_bin_of(const BoundingBox& box, const SceneConfig& config);

/// Deterministic in (seed, condition, class_id). Samples sharing a seed are
/// controlled transforms of the same base scene.
Sample generate_sample(std::uint64_t seed, ConditionTag condition, int class_id, const SceneConfig& config,
                       const std::vector<ClassDef>& classes);

struct ManifestRow {
  std::string path;
  int class_id = 0;
  std::string class_name;
  BoundingBox box;
  ConditionTag condition = ConditionTag::Normal;
  SizeBin size_bin = SizeBin::Small;
  std::uint64_t seed = 0;
  bool operator==(const ManifestRow&) const = default;
};

inline constexpr const char* kManifestHeader = "path,class_id,class_name,x,y,w,h,condition,size_bin,seed";
std::string manifest_to_string(const std::vector<ManifestRow>& rows);
/// Throws ParseError naming the line on malformed input.
std::vector<ManifestRow> parse_manifest(const std::string& text);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

struct DatasetConfig {
  SceneConfig scene;
  int train_count = 4000;
  std::map<ConditionTag, int> test_counts;  // missing conditions get zero

  static std::map<ConditionTag, int> default_test_counts();
  /// Parses "normal=100,gravity=50".
  static std::map<ConditionTag, int> parse_counts(const std::string& spec);
  static std::string format_counts(const std::map<ConditionTag, int>& counts);
};

std::uint64_t sample_seed(std::uint64_t master_seed, const std::string& split, std::uint64_t index);

/// Writes <out>/train and <out>/test, each with images/ and manifest.csv. The
/// train split holds Normal samples only. Returns the number of images written.
std::size_t build_dataset(const std::filesystem::path& out, const DatasetConfig& config, std::uint64_t master_seed,
                          int threads = 1);

}  // namespace crtnet
