#pragma once

#include <string>
#include <vector>

namespace ufa::detail {

struct DomainTemplate {
  std::string label;
  std::vector<std::string> items;
};

struct IntentTemplate {
  std::string label;
  std::vector<std::string> requests;     // customer problem statements, {item} slot
  std::vector<std::string> resolutions;  // agent replies, {item} slot
  std::vector<std::string> followups;    // customer follow-up questions
  std::vector<std::string> answers;      // agent follow-up answers
  std::string asked;                     // summary fragment for the customer side
  std::string resolved;                  // summary fragment for the agent side
};

const std::vector<DomainTemplate>& domain_templates();
const std::vector<IntentTemplate>& intent_templates();

// Long-tail request phrasing: per-intent cue phrases (most frequent first,
// aligned with intent_templates) and frames shared by every intent, with
// {cue} and {item} slots.
const std::vector<std::vector<std::string>>& intent_cues();
const std::vector<std::string>& cue_frames();

}  // namespace ufa::detail
