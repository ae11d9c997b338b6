from __future__ import annotations

import hypothesis

# Profiles must exist before the hypothesis plugin reads --hypothesis-profile.
hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
