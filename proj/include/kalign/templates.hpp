#pragma once
// Fixed prompt wording. Everything that interpolates text at train or eval
// time lives here so the strings stay byte-stable across the codebase.

namespace kalign::templates {

// Instruction used for triple-completion language modeling and for the
// tail-prediction QA task.
inline constexpr const char* kTripleCompletionInstruction =
    "Given the head entity and relation, write a tail entity that completes the triple";

// Three-field instruction layout: {inst} and {input} are interpolated, the
// response text follows the final header.
inline constexpr const char* kPromptPreamble =
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request.";
inline constexpr const char* kInstructionHeader = "### Instruction:";
inline constexpr const char* kInputHeader = "### Input:";
inline constexpr const char* kResponseHeader = "### Response:";

// QA task instructions. Head prediction reuses the tail-prediction wording
// against the inverse relation; relation prediction appends the "|"-joined
// relation list; classification expects a yes/no answer.
inline constexpr const char* kRelationPredictionInstruction =
    "Given the head entity and tail entity, select the relation from the relation list "
    "that completes the triple. relation list: ";
inline constexpr const char* kTripleClassificationInstruction =
    "Given a triple of head entity, relation and tail entity, answer yes if the triple "
    "is true and answer no if the triple is false";

}  // namespace kalign::templates
