#include "crtnet/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "crtnet/errors.hpp"

namespace crtnet {

// Names ----------------------------------------------------------------------

std::string to_string(RoomKind room) {
  static const char* names[] = {"kitchen", "bathroom", "bedroom", "study", "living"};
  return names[static_cast<int>(room)];
}

std::string to_string(SupportKind kind) {
  static const char* names[] = {"counter", "shelf", "table", "cabinet"};
  return names[static_cast<int>(kind)];
}

namespace {
const char* const kConditionNames[] = {"normal", "nocontext_grey", "nocontext_saltpepper",
                                       "gravity", "cooccur", "cooccur_gravity",
                                       "size2", "size3", "size4"};
}

std::string to_string(ConditionTag tag) { return kConditionNames[static_cast<int>(tag)]; }

ConditionTag parse_condition(const std::string& name) {
  for (int i = 0; i < kConditionTags; ++i)
    if (name == kConditionNames[i]) return static_cast<ConditionTag>(i);
  throw ParseError("unknown condition '" + name + "'");
}

const std::vector<ConditionTag>& all_conditions() {
  static const std::vector<ConditionTag> tags = [] {
    std::vector<ConditionTag> t;
    for (int i = 0; i < kConditionTags; ++i) t.push_back(static_cast<ConditionTag>(i));
    return t;
  }();
  return tags;
}

std::string to_string(SizeBin bin) { return bin == SizeBin::Small ? "small" : "large"; }

SizeBin parse_size_bin(const std::string& name) {
  if (name == "small") return SizeBin::Small;
  if (name == "large") return SizeBin::Large;
  throw ParseError("unknown size bin '" + name + "'");
}

// Class roster -----------------------------------------------------------------

namespace {

Glyph make_glyph(const std::array<const char*, 8>& rows, std::vector<Rgb> palette) {
  Glyph g;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) g.cells[static_cast<std::size_t>(r * 8 + c)] = static_cast<std::uint8_t>(rows[r][c] - '0');
  g.palette = std::move(palette);
  return g;
}

std::vector<ClassDef> build_roster() {
  const Glyph disc = make_glyph({"00111100", "01122110", "11222211", "12211221",
                                 "12211221", "11222211", "01122110", "00111100"},
                                {{0.55, 0.05, 0.10}, {0.95, 0.85, 0.10}, {1.0, 1.0, 1.0}});
  const Glyph framed = make_glyph({"22222222", "20000002", "20111102", "20100102",
                                   "20100102", "20111102", "20000002", "22222222"},
                                  {{0.10, 0.10, 0.40}, {1.0, 0.50, 0.0}, {0.05, 0.05, 0.05}});
  const Glyph plant = make_glyph({"11000011", "10022001", "00222200", "02222220",
                                  "00022000", "00011000", "00111100", "01111110"},
                                 {{0.85, 0.95, 0.85}, {0.40, 0.20, 0.10}, {0.10, 0.60, 0.10}});
  const Glyph pan = make_glyph({"00000000", "01111110", "11111111", "11222211",
                                "11222211", "11111111", "01111110", "00000000"},
                               {{0.70, 0.70, 0.75}, {0.15, 0.15, 0.15}, {0.90, 0.40, 0.10}});
  const Glyph towel = make_glyph({"00000000", "11111111", "00000000", "22222222",
                                  "00000000", "11111111", "00000000", "22222222"},
                                 {{1.0, 1.0, 1.0}, {0.95, 0.50, 0.70}, {0.10, 0.60, 0.60}});
  const Glyph lamp = make_glyph({"00111100", "01111110", "11111111", "00022000",
                                 "00022000", "00022000", "00222200", "02222220"},
                                {{0.20, 0.20, 0.30}, {1.0, 0.95, 0.60}, {0.50, 0.50, 0.50}});
  using R = RoomKind;
  using S = SupportKind;
  return {
      {0, "jar", disc, {R::Kitchen}, S::Counter, 14, true},
      {1, "lotion", disc, {R::Bathroom}, S::Shelf, 14, true},
      {2, "book", framed, {R::Study}, S::Table, 16, true},
      {3, "clock", framed, {R::Bedroom}, S::Cabinet, 16, true},
      {4, "plant", plant, {R::Living}, S::Table, 24, true},
      {5, "pan", pan, {R::Kitchen}, S::Counter, 22, true},
      {6, "towel", towel, {R::Bathroom}, S::Shelf, 26, true},
      {7, "lamp", lamp, {R::Bedroom}, S::Cabinet, 24, true},
  };
}

bool same_glyph(const Glyph& a, const Glyph& b) { return a.cells == b.cells && a.palette == b.palette; }

}  // namespace

const std::vector<ClassDef>& default_classes() {
  static const std::vector<ClassDef> roster = build_roster();
  return roster;
}

int ambiguous_partner(const std::vector<ClassDef>& classes, int class_id) {
  const ClassDef& me = classes.at(static_cast<std::size_t>(class_id));
  for (const ClassDef& other : classes) {
    if (other.class_id == class_id || !same_glyph(me.glyph, other.glyph)) continue;
    const bool disjoint = std::none_of(me.home_rooms.begin(), me.home_rooms.end(), [&](RoomKind r) {
      return std::find(other.home_rooms.begin(), other.home_rooms.end(), r) != other.home_rooms.end();
    });
    if (disjoint) return other.class_id;
  }
  return -1;
}

bool is_ambiguous(const std::vector<ClassDef>& classes, int class_id) {
  return ambiguous_partner(classes, class_id) >= 0;
}

RoomPalette room_palette(RoomKind room) {
  switch (room) {
    case RoomKind::Kitchen: return {{0.93, 0.88, 0.55}, {1.0, 1.0, 1.0}, {0.30, 0.30, 0.32}, 1};
    case RoomKind::Bathroom: return {{0.60, 0.85, 0.92}, {0.90, 0.97, 1.0}, {0.55, 0.62, 0.70}, 3};
    case RoomKind::Bedroom: return {{0.75, 0.65, 0.85}, {0.60, 0.50, 0.75}, {0.55, 0.20, 0.25}, 2};
    case RoomKind::Study: return {{0.35, 0.55, 0.40}, {0.50, 0.35, 0.20}, {0.35, 0.22, 0.12}, 4};
    case RoomKind::Living: return {{0.95, 0.70, 0.50}, {0.85, 0.55, 0.35}, {0.75, 0.60, 0.40}, 0};
  }
  return {};
}

// Config -----------------------------------------------------------------------

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("scene config: " + m); };
  if (image_size < 48) fail("image_size must be at least 48");
  if (!(lift_fraction > 0.0 && lift_fraction < 0.5)) fail("lift_fraction must lie in (0, 0.5)");
  if (!(center_jitter >= 0.0 && center_jitter <= 0.2)) fail("center_jitter must lie in [0, 0.2]");
  if (small_threshold < 1) fail("small_threshold must be positive");
  for (double p : {room_cue_prob, support_cue_prob})
    if (!(p >= 0.0 && p <= 1.0)) fail("cue probabilities must lie in [0, 1]");
  if (!(size_jitter >= 0.0 && size_jitter < 0.5)) fail("size_jitter must lie in [0, 0.5)");
  if (max_attempts < 1) fail("max_attempts must be positive");
}

int SceneConfig::floor_y() const { return static_cast<int>(std::lround(image_size * 0.83)); }
int SceneConfig::lift_pixels() const { return static_cast<int>(std::lround(lift_fraction * image_size)); }

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int i = std::stoi(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
}

}  // namespace

std::map<std::string, std::string> SceneConfig::to_map() const {
  return {{"image_size", std::to_string(image_size)},       {"lift_fraction", fmt(lift_fraction)},
          {"center_jitter", fmt(center_jitter)},            {"small_threshold", std::to_string(small_threshold)},
          {"room_cue_prob", fmt(room_cue_prob)},            {"support_cue_prob", fmt(support_cue_prob)},
          {"size_jitter", fmt(size_jitter)},                {"max_attempts", std::to_string(max_attempts)}};
}

SceneConfig SceneConfig::from_map(const std::map<std::string, std::string>& kv) {
  SceneConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "image_size") c.image_size = to_int(k, v);
    else if (k == "lift_fraction") c.lift_fraction = to_double(k, v);
    else if (k == "center_jitter") c.center_jitter = to_double(k, v);
    else if (k == "small_threshold") c.small_threshold = to_int(k, v);
    else if (k == "room_cue_prob") c.room_cue_prob = to_double(k, v);
    else if (k == "support_cue_prob") c.support_cue_prob = to_double(k, v);
    else if (k == "size_jitter") c.size_jitter = to_double(k, v);
    else if (k == "max_attempts") c.max_attempts = to_int(k, v);
    else throw ConfigError("unknown scene key '" + k + "'");
  }
  return c;
}

// Rendering ----------------------------------------------------------------------

namespace {

Rgb shade(const Rgb& c, double f) {
  return {std::clamp(c[0] * f, 0.0, 1.0), std::clamp(c[1] * f, 0.0, 1.0), std::clamp(c[2] * f, 0.0, 1.0)};
}

Rgb jitter(const Rgb& c, double amount, Rng& rng) {
  Rgb out;
  for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(i)] = std::clamp(c[static_cast<std::size_t>(i)] + rng.uniform(-amount, amount), 0.0, 1.0);
  return out;
}

Rgb support_base_color(SupportKind kind) {
  switch (kind) {
    case SupportKind::Counter: return {0.88, 0.88, 0.90};
    case SupportKind::Shelf: return {0.45, 0.28, 0.12};
    case SupportKind::Table: return {0.80, 0.55, 0.30};
    case SupportKind::Cabinet: return {0.25, 0.35, 0.75};
  }
  return {};
}

// Every support is a thin wall-mounted slab; the kind shows only in its styling.
void draw_furniture(Image& img, const Furniture& f) {
  const BoundingBox& r = f.rect;
  switch (f.kind) {
    case SupportKind::Counter:
      img.fill_rect(r.x, r.y, r.w, r.h, f.color);
      img.fill_rect(r.x, r.y, r.w, 2, {0.30, 0.30, 0.30});
      break;
    case SupportKind::Shelf:
      img.fill_rect(r.x, r.y, r.w, 3, f.color);
      img.fill_rect(r.x + 2, r.y + 3, 2, r.h - 3, {0.55, 0.55, 0.55});
      img.fill_rect(r.x + r.w - 4, r.y + 3, 2, r.h - 3, {0.55, 0.55, 0.55});
      break;
    case SupportKind::Table:
      img.fill_rect(r.x, r.y, r.w, 3, f.color);
      img.fill_rect(r.x + 1, r.y + 3, 2, r.h - 3, shade(f.color, 0.75));
      img.fill_rect(r.x + r.w - 3, r.y + 3, 2, r.h - 3, shade(f.color, 0.75));
      img.fill_rect(r.x + r.w / 2 - 1, r.y + 3, 2, r.h - 3, shade(f.color, 0.75));
      break;
    case SupportKind::Cabinet:
      img.fill_rect(r.x, r.y, r.w, r.h, f.color);
      img.fill_rect(r.x + r.w / 2 - 3, r.y + 2, 2, 2, {0.95, 0.85, 0.20});
      img.fill_rect(r.x + r.w / 2 + 2, r.y + 2, 2, 2, {0.95, 0.85, 0.20});
      break;
  }
}

void draw_room(Image& img, const RoomPalette& pal, int floor_y) {
  const int n = img.width();
  img.fill_rect(0, 0, n, floor_y, pal.wall);
  switch (pal.pattern) {
    case 1:
      for (int v = 0; v < n; v += 8) {
        img.fill_rect(v, 0, 1, floor_y, pal.accent);
        img.fill_rect(0, v, n, v < floor_y ? 1 : 0, pal.accent);
      }
      break;
    case 2:
      for (int x = 0; x < n; x += 10) img.fill_rect(x, 0, 4, floor_y, pal.accent);
      break;
    case 3:
      for (int y = 3; y < floor_y - 2; y += 9)
        for (int x = 3 + (y / 9 % 2) * 4; x < n; x += 9) img.fill_rect(x, y, 2, 2, pal.accent);
      break;
    case 4:
      img.fill_rect(0, floor_y * 2 / 3, n, floor_y - floor_y * 2 / 3, pal.accent);
      img.fill_rect(0, floor_y * 2 / 3, n, 1, shade(pal.accent, 0.7));
      break;
    default:
      break;
  }
  img.fill_rect(0, floor_y, n, img.height() - floor_y, pal.floor);
  img.fill_rect(0, floor_y, n, 1, shade(pal.floor, 0.7));
}

}  // namespace

void draw_glyph(Image& image, const Glyph& glyph, const BoundingBox& box) {
  for (int yy = 0; yy < box.h; ++yy) {
    const int py = box.y + yy;
    if (py < 0 || py >= image.height()) continue;
    const int gr = yy * 8 / box.h;
    for (int xx = 0; xx < box.w; ++xx) {
      const int px = box.x + xx;
      if (px < 0 || px >= image.width()) continue;
      const int gc = xx * 8 / box.w;
      image.set_pixel(px, py, glyph.palette[glyph.cells[static_cast<std::size_t>(gr * 8 + gc)]]);
    }
  }
}

Image Scene::render_background(const SceneConfig& config) const {
  Image img(config.image_size, config.image_size);
  draw_room(img, palette, config.floor_y());
  for (const Furniture& f : furniture) draw_furniture(img, f);
  return img;
}

Image Scene::render(const SceneConfig& config, const std::vector<ClassDef>& classes) const {
  Image img = render_background(config);
  draw_glyph(img, classes.at(static_cast<std::size_t>(class_id)).glyph, target);
  return img;
}

bool Scene::target_supported() const {
  for (const Furniture& f : furniture)
    if (f.surface_y() == target.bottom() && f.rect.x < target.right() && target.x < f.rect.right()) return true;
  return false;
}

// Scene generation -------------------------------------------------------------------

namespace {

bool overlaps(const BoundingBox& a, const BoundingBox& b, int margin) {
  return a.x < b.right() + margin && b.x < a.right() + margin && a.y < b.bottom() + margin &&
         b.y < a.bottom() + margin;
}

constexpr int kSlabHeight = 6;

Furniture make_piece(SupportKind kind, int x, int top, int width, const Rgb& color) {
  return {kind, {x, top, width, kSlabHeight}, color};
}

}  // namespace

Scene generate_base_scene(Rng& rng, int class_id, const SceneConfig& config, const std::vector<ClassDef>& classes,
                          const SceneOptions& options) {
  if (class_id < 0 || class_id >= static_cast<int>(classes.size()))
    throw IndexError("class id " + std::to_string(class_id) + " not in roster");
  const ClassDef& cls = classes[static_cast<std::size_t>(class_id)];
  const int n = config.image_size;
  const int floor_y = config.floor_y();
  const double scale = n / 96.0;

  Scene scene;
  scene.class_id = class_id;
  scene.room = options.room ? *options.room
                            : cls.home_rooms[static_cast<std::size_t>(rng.uniform_int(cls.home_rooms.size()))];
  scene.decor_visible = rng.bernoulli(config.room_cue_prob);
  if (scene.decor_visible) {
    const RoomPalette base = room_palette(scene.room);
    scene.palette = {jitter(base.wall, 0.04, rng), jitter(base.accent, 0.04, rng), jitter(base.floor, 0.04, rng),
                     base.pattern};
  } else {
    const double g = rng.uniform(0.55, 0.8);
    scene.palette = {{g, g, g * 0.97}, {g, g, g * 0.97}, {g - 0.2, g - 0.2, g - 0.22}, 0};
  }
  const SupportKind support =
      rng.bernoulli(config.support_cue_prob) ? cls.support
                                             : static_cast<SupportKind>(rng.uniform_int(std::uint64_t{kSupportKinds}));

  auto side = [&](double base) {
    return std::max(4, static_cast<int>(std::lround(base * scale * (1.0 + rng.uniform(-config.size_jitter, config.size_jitter)))));
  };
  const int w = side(cls.base_size);
  const int h = side(cls.base_size);
  const double span = config.center_jitter * n;
  const double cx = n / 2.0 + rng.uniform(-span, span);
  double cy = n / 2.0 + rng.uniform(-span, span);
  if (options.target_center_y) cy = *options.target_center_y;
  scene.target = {static_cast<int>(std::lround(cx - w / 2.0)), static_cast<int>(std::lround(cy - h / 2.0)), w, h};
  if (scene.target.x < 0 || scene.target.y < 0 || scene.target.right() > n || scene.target.bottom() > floor_y - 4)
    throw GenerationError("target does not fit above the floor");

  // Decoy slabs must stay clear of the target and of the space a lift would
  // move it into, so every condition shares one layout.
  const int lift = config.lift_pixels();
  const BoundingBox keep_out{scene.target.x - 2, scene.target.y - lift - 2, w + 4, h + lift + 4};
  const int top_margin = static_cast<int>(std::lround(6 * scale));
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    scene.furniture.clear();
    const int width = w + rng.uniform_int(6, 14);
    int sx = scene.target.x + w / 2 - width / 2 + rng.uniform_int(-2, 2);
    sx = std::clamp(sx, std::max(0, scene.target.right() - width), std::min(scene.target.x, n - width));
    scene.furniture.push_back(
        make_piece(support, sx, scene.target.bottom(), width, jitter(support_base_color(support), 0.03, rng)));
    scene.support_index = 0;
    if (scene.furniture[0].rect.bottom() > floor_y) continue;

    const int decoys = rng.uniform_int(5, 7);
    for (int d = 0; d < decoys; ++d) {
      const auto kind = static_cast<SupportKind>(rng.uniform_int(std::uint64_t{kSupportKinds}));
      // The first decoy prefers the target's own column, below the support.
      const bool in_column = d == 0 && rng.bernoulli(0.6);
      for (int tries = 0; tries < 20; ++tries) {
        const int pw = static_cast<int>(std::lround(rng.uniform_int(14, 22) * scale));
        const int px = in_column ? std::clamp(sx + width / 2 - pw / 2 + rng.uniform_int(-4, 4), 0, n - pw)
                                 : rng.uniform_int(0, n - pw);
        const int py = rng.uniform_int(top_margin, floor_y - kSlabHeight - 2);
        Furniture piece = make_piece(kind, px, py, pw, jitter(support_base_color(kind), 0.03, rng));
        if (overlaps(piece.rect, keep_out, 0)) continue;
        if (piece.surface_y() == scene.target.bottom() - lift) continue;  // would meet a lifted target's edge
        if (std::any_of(scene.furniture.begin(), scene.furniture.end(),
                        [&](const Furniture& f) { return overlaps(piece.rect, f.rect, 2); }))
          continue;
        scene.furniture.push_back(piece);
        break;
      }
    }
    return scene;
  }
  throw GenerationError("no layout fits after " + std::to_string(config.max_attempts) + " attempts");
}

Scene apply_gravity(const Scene& scene, const SceneConfig& config) {
  if (!scene.target_supported()) throw GenerationError("gravity: target is not resting on a surface");
  Scene out = scene;
  out.target.y -= config.lift_pixels();
  if (out.target.y < 0) {
    out.target.y = 0;
    out.clamped = true;
  }
  out.support_index = -1;
  return out;
}

RoomKind apply_cooccurrence(int class_id, Rng& rng, const std::vector<ClassDef>& classes) {
  const ClassDef& cls = classes.at(static_cast<std::size_t>(class_id));
  std::vector<RoomKind> options;
  for (int r = 0; r < kRoomKinds; ++r) {
    const auto room = static_cast<RoomKind>(r);
    if (std::find(cls.home_rooms.begin(), cls.home_rooms.end(), room) == cls.home_rooms.end()) options.push_back(room);
  }
  if (options.empty())
    throw ConditionUnavailableError("class '" + cls.name + "' is at home in every room; no co-occurrence violation");
  return options[static_cast<std::size_t>(rng.uniform_int(options.size()))];
}

Scene cooccur_gravity_resting(int class_id, Rng& rng, const SceneConfig& config,
                              const std::vector<ClassDef>& classes) {
  const RoomKind room = apply_cooccurrence(class_id, rng, classes);
  // The support sits one lift below the half-height position so the raised
  // target ends up centred and clear of it.
  SceneOptions opts{room, config.image_size / 2.0 + config.lift_pixels()};
  return generate_base_scene(rng, class_id, config, classes, opts);
}

Scene apply_cooccur_gravity(int class_id, Rng& rng, const SceneConfig& config, const std::vector<ClassDef>& classes) {
  return apply_gravity(cooccur_gravity_resting(class_id, rng, config, classes), config);
}

Scene apply_size(const Scene& scene, int factor, const SceneConfig& config) {
  if (factor < 2 || factor > 4) throw ParameterError("size factor must be 2, 3 or 4, got " + std::to_string(factor));
  const int n = config.image_size;
  const BoundingBox& t = scene.target;
  const double cx = t.x + t.w / 2.0;
  const int bottom = t.bottom();
  double s = factor;
  s = std::min(s, static_cast<double>(bottom) / t.h);
  s = std::min(s, 2.0 * std::min(cx, n - cx) / t.w);
  Scene out = scene;
  if (s < factor) out.clamped = true;
  const int w = s < factor ? static_cast<int>(std::floor(t.w * s)) : t.w * factor;
  const int h = s < factor ? static_cast<int>(std::floor(t.h * s)) : t.h * factor;
  out.target = {t.x - (w - t.w) / 2, bottom - h, w, h};
  return out;
}

Image blank_context(const Image& image, const BoundingBox& box, BlankMode mode, Rng& rng) {
  Image out = image;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      if (box.contains(x, y)) continue;
      if (mode == BlankMode::Grey) {
        out.set_pixel(x, y, {0.5, 0.5, 0.5});
      } else {
        const double v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        out.set_pixel(x, y, {v, v, v});
      }
    }
  return out;
}

SizeBin size_bin_of(const BoundingBox& box, const SceneConfig& config) {
  return std::max(box.w, box.h) < config.small_threshold ? SizeBin::Small : SizeBin::Large;
}

Sample generate_sample(std::uint64_t seed, ConditionTag condition, int class_id, const SceneConfig& config,
                       const std::vector<ClassDef>& classes) {
  config.validate();
  constexpr int kReseeds = 16;
  for (std::uint64_t retry = 0; retry < kReseeds; ++retry) {
    try {
      Rng base(derive_seed({seed, 1, retry}));
      Rng violation(derive_seed({seed, 2, retry}));
      Rng noise(derive_seed({seed, 3, retry}));
      Scene scene;
      switch (condition) {
        case ConditionTag::CoOccur: {
          const RoomKind room = apply_cooccurrence(class_id, violation, classes);
          scene = generate_base_scene(violation, class_id, config, classes, SceneOptions{room, std::nullopt});
          break;
        }
        case ConditionTag::CoOccurGravity:
          scene = apply_cooccur_gravity(class_id, violation, config, classes);
          break;
        default:
          scene = generate_base_scene(base, class_id, config, classes);
          break;
      }
      if (condition == ConditionTag::Gravity) scene = apply_gravity(scene, config);
      if (condition == ConditionTag::Size2) scene = apply_size(scene, 2, config);
      if (condition == ConditionTag::Size3) scene = apply_size(scene, 3, config);
      if (condition == ConditionTag::Size4) scene = apply_size(scene, 4, config);

      Sample s;
      s.image = scene.render(config, classes);
      if (condition == ConditionTag::NoContextGrey) s.image = blank_context(s.image, scene.target, BlankMode::Grey, noise);
      if (condition == ConditionTag::NoContextSaltPepper)
        s.image = blank_context(s.image, scene.target, BlankMode::SaltPepper, noise);
      s.box = scene.target;
      s.class_id = class_id;
      s.condition = condition;
      s.size_bin = size_bin_of(s.box, config);
      s.seed = seed;
      s.scene = std::move(scene);
      return s;
    } catch (const ConditionUnavailableError&) {
      throw;
    } catch (const GenerationError&) {
      // reseed and try again
    }
  }
  throw GenerationError("sample " + std::to_string(seed) + " could not be generated after reseeding");
}

// Manifest --------------------------------------------------------------------------

std::string manifest_to_string(const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const ManifestRow& r : rows) {
    if (r.path.find_first_of(",\n") != std::string::npos || r.class_name.find_first_of(",\n") != std::string::npos)
      throw InputError("manifest fields may not contain commas or newlines");
    out << r.path << ',' << r.class_id << ',' << r.class_name << ',' << r.box.x << ',' << r.box.y << ',' << r.box.w
        << ',' << r.box.h << ',' << to_string(r.condition) << ',' << to_string(r.size_bin) << ',' << r.seed << '\n';
  }
  return out.str();
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

long long parse_integer(const std::string& s, std::size_t line, const char* field) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("manifest line " + std::to_string(line) + ": bad " + field + " '" + s + "'");
}

}  // namespace

std::vector<ManifestRow> parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kManifestHeader) throw ParseError("manifest line 1: unexpected header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 10)
      throw ParseError("manifest line " + std::to_string(lineno) + ": expected 10 fields, got " + std::to_string(f.size()));
    ManifestRow r;
    r.path = f[0];
    r.class_id = static_cast<int>(parse_integer(f[1], lineno, "class_id"));
    r.class_name = f[2];
    r.box = {static_cast<int>(parse_integer(f[3], lineno, "x")), static_cast<int>(parse_integer(f[4], lineno, "y")),
             static_cast<int>(parse_integer(f[5], lineno, "w")), static_cast<int>(parse_integer(f[6], lineno, "h"))};
    try {
      r.condition = parse_condition(f[7]);
      r.size_bin = parse_size_bin(f[8]);
      std::size_t used = 0;
      r.seed = std::stoull(f[9], &used);
      if (used != f[9].size() || f[9].empty() || f[9][0] == '-') throw ParseError("seed");
    } catch (const std::exception& e) {
      throw ParseError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    rows.push_back(std::move(r));
  }
  if (lineno == 0) throw ParseError("manifest is empty");
  return rows;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest_to_string(rows);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str());
}

// Dataset ------------------------------------------------------------------------------

std::map<ConditionTag, int> DatasetConfig::default_test_counts() {
  return {{ConditionTag::Normal, 600},        {ConditionTag::NoContextGrey, 600},
          {ConditionTag::NoContextSaltPepper, 300}, {ConditionTag::Gravity, 600},
          {ConditionTag::CoOccur, 600},       {ConditionTag::CoOccurGravity, 600},
          {ConditionTag::Size2, 200},         {ConditionTag::Size3, 200},
          {ConditionTag::Size4, 200}};
}

std::map<ConditionTag, int> DatasetConfig::parse_counts(const std::string& spec) {
  std::map<ConditionTag, int> out;
  std::stringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("count entry '" + item + "' is not condition=n");
    ConditionTag tag;
    try {
      tag = parse_condition(item.substr(0, eq));
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
    const int n = to_int(item.substr(0, eq), item.substr(eq + 1));
    if (n < 0) throw ConfigError("negative count for " + item.substr(0, eq));
    out[tag] = n;
  }
  return out;
}

std::string DatasetConfig::format_counts(const std::map<ConditionTag, int>& counts) {
  std::string out;
  for (const auto& [tag, n] : counts) {
    if (!out.empty()) out += ',';
    out += to_string(tag) + "=" + std::to_string(n);
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t master_seed, const std::string& split, std::uint64_t index) {
  std::uint64_t tag = 0xcbf29ce484222325ULL;  // FNV-1a of the split name
  for (unsigned char ch : split) tag = (tag ^ ch) * 0x100000001b3ULL;
  return derive_seed({master_seed, tag, index});
}

namespace {

struct Job {
  std::string rel_path;
  std::uint64_t seed;
  ConditionTag condition;
  int class_id;
};

std::vector<ManifestRow> run_jobs(const std::filesystem::path& dir, const std::vector<Job>& jobs,
                                  const SceneConfig& config, const std::vector<ClassDef>& classes, int threads) {
  std::vector<ManifestRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    try {
      for (std::size_t i = next++; i < jobs.size() && !failed; i = next++) {
        const Job& j = jobs[i];
        const Sample s = generate_sample(j.seed, j.condition, j.class_id, config, classes);
        write_ppm(dir / j.rel_path, s.image);
        rows[i] = {j.rel_path, j.class_id, classes[static_cast<std::size_t>(j.class_id)].name, s.box,
                   j.condition, s.size_bin, j.seed};
      }
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  const int n = std::max(1, threads);
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

std::size_t build_dataset(const std::filesystem::path& out, const DatasetConfig& config, std::uint64_t master_seed,
                          int threads) {
  config.scene.validate();
  if (config.train_count < 0) throw ConfigError("train_count must be non-negative");
  const auto& classes = default_classes();
  const int num_classes = static_cast<int>(classes.size());
  char name[64];

  std::vector<Job> train;
  for (int k = 0; k < config.train_count; ++k) {
    std::snprintf(name, sizeof name, "images/%06d.ppm", k);
    train.push_back({name, sample_seed(master_seed, "train", static_cast<std::uint64_t>(k)), ConditionTag::Normal,
                     k % num_classes});
  }
  std::vector<Job> test;
  for (ConditionTag tag : all_conditions()) {
    const auto it = config.test_counts.find(tag);
    const int count = it == config.test_counts.end() ? 0 : it->second;
    for (int k = 0; k < count; ++k) {
      std::snprintf(name, sizeof name, "images/%s_%06d.ppm", to_string(tag).c_str(), k);
      test.push_back({name, sample_seed(master_seed, "test", static_cast<std::uint64_t>(k)), tag, k % num_classes});
    }
  }

  std::size_t written = 0;
  for (const auto& [split, jobs] : {std::pair{std::string("train"), &train}, std::pair{std::string("test"), &test}}) {
    const auto dir = out / split;
    make_dirs(dir / "images");
    const auto rows = run_jobs(dir, *jobs, config.scene, classes, threads);
    write_manifest(dir / "manifest.csv", rows);
    written += rows.size();
  }
  return written;
}

}  // namespace crtnet
