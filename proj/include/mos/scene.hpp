#pragma once

// Synthetic scene world: a 4x4 grid of 8x8-pixel cells on a 32x32 RGB canvas.
// Entities are (shape, color, cell) triples drawn with fixed per-shape masks
// on a mid-gray background.  Captions follow the grammar
//
//   caption     := EMPTY | entity+
//   entity      := COLOR SHAPE AT ROW COL          (row-major entity order)
//   instruction := RECOLOR ROW COL COLOR
//                | MOVE ROW COL TO ROW COL
//                | REMOVE ROW COL
//                | ADD COLOR SHAPE AT ROW COL
//
// over a fixed vocabulary of 23 token ids (see token_name/token_id).  The
// grammar is bijective: caption_of(parse_caption(c)) == c for every valid c.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mos/rng.hpp"
#include "mos/tensor.hpp"

namespace mos {

constexpr int kGridSize = 4;
constexpr int kCellPixels = 8;
constexpr int kImageSize = kGridSize * kCellPixels;  // 32
constexpr int kMaxEntities = 4;
constexpr float kBackground = 0.5f;

enum class Shape : uint8_t { kSquare = 0, kCircle, kTriangle, kCross };
enum class Color : uint8_t { kRed = 0, kGreen, kBlue, kYellow, kMagenta, kCyan, kWhite, kBlack };
constexpr int kNumShapes = 4;
constexpr int kNumColors = 8;

struct Entity {
  Shape shape;
  Color color;
  int row;
  int col;
  bool operator==(const Entity&) const = default;
};

struct SceneSpec {
  std::vector<Entity> entities;
  bool operator==(const SceneSpec&) const = default;
};

// Palette colors sit at RGB cube corners.
std::array<float, 3> color_rgb(Color c);

// Fixed binary mask of a shape within its 8x8 cell, row-major.
const std::array<bool, kCellPixels * kCellPixels>& shape_mask(Shape s);

// ---- token vocabulary -----------------------------------------------------

// Fixed ids: 0 EMPTY; 1-8 colors; 9-12 shapes; 13 AT; 14-17 digits 0-3;
// 18 RECOLOR, 19 MOVE, 20 REMOVE, 21 ADD, 22 TO.
constexpr int kTokenCount = 23;
const char* token_name(int id);
int token_id(const std::string& word);  // case-insensitive; throws on unknown words
int color_token(Color c);
int shape_token(Shape s);
int digit_token(int v);  // 0..3

// ---- rendering and captions -------------------------------------------------

// [32,32,3] float image; throws if two entities share a cell or a cell index
// is out of range.
Tensor render_scene(const SceneSpec& spec);

// Entities in row-major order; empty scene -> {EMPTY}.
std::vector<int> caption_of(const SceneSpec& spec);

// Strict inverse of caption_of: requires row-major order, distinct cells, and
// exact grammar; throws std::invalid_argument naming the offending position.
SceneSpec parse_caption(const std::vector<int>& tokens);

// Lenient text entry for prompts ("red square at 0 0 blue circle at 2 3"):
// any entity order, canonicalized to row-major; duplicate cells still error.
SceneSpec parse_prompt(const std::string& text);

std::string tokens_to_string(const std::vector<int>& tokens);

// ---- alignment --------------------------------------------------------------

// Fraction of spec entities realized in the image.  An entity counts when
//  (a) the mean color under its shape mask is within 0.25 (L2) of the target
//      palette color, and
//  (b) the Pearson correlation between the shape mask and the per-pixel
//      distance-from-background map over its cell exceeds 0.5.
// Empty spec scores 1.0 vacuously.  Image must be [32,32,3] in unit range.
double alignment_score(const Tensor& image, const SceneSpec& spec);

// ---- edits -------------------------------------------------------------------

// Applies an instruction to a scene; throws std::invalid_argument when the
// instruction is malformed or not applicable (missing entity, occupied cell).
SceneSpec apply_edit(const SceneSpec& scene, const std::vector<int>& instruction);

// Uniform over applicable operation types, then uniform over their arguments.
std::vector<int> sample_edit_instruction(const SceneSpec& scene, Pcg32& rng);

// Uniform random scene: entity count 1..4, distinct cells, uniform shape/color.
SceneSpec sample_scene(Pcg32& rng);

}  // namespace mos
