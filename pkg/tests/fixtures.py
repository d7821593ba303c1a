"""Shared XML fixtures for ingestion tests, with hand-counted expectations."""

# Two sentences, three aspect terms: positive x2, negative x1.
SEM14_FIXTURE = """<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="1">
    <text>the steak was great but the service was slow.</text>
    <aspectTerms>
      <aspectTerm term="steak" polarity="positive" from="4" to="9"/>
      <aspectTerm term="service" polarity="negative" from="28" to="35"/>
    </aspectTerms>
  </sentence>
  <sentence id="2">
    <text>amazing wine list.</text>
    <aspectTerms>
      <aspectTerm term="wine list" polarity="positive" from="8" to="17"/>
    </aspectTerms>
  </sentence>
</sentences>
"""

# One extra term with the out-of-scope "conflict" polarity.
SEM14_CONFLICT_FIXTURE = """<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="1">
    <text>the pasta was tasty but pricey.</text>
    <aspectTerms>
      <aspectTerm term="pasta" polarity="conflict" from="4" to="9"/>
    </aspectTerms>
  </sentence>
</sentences>
"""

SEM14_NO_ASPECTS_FIXTURE = """<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="1">
    <text>we arrived at noon.</text>
  </sentence>
</sentences>
"""

# Two reviews, three opinions (one NULL target dropped): positive, negative, neutral.
SEM16_FIXTURE = """<?xml version="1.0" encoding="UTF-8"?>
<Reviews>
  <Review rid="r1">
    <sentences>
      <sentence id="r1:1">
        <text>the keyboard was wonderful.</text>
        <Opinions>
          <Opinion target="keyboard" polarity="positive" from="4" to="12"/>
        </Opinions>
      </sentence>
      <sentence id="r1:2">
        <text>battery life was awful.</text>
        <Opinions>
          <Opinion target="battery life" polarity="negative" from="0" to="12"/>
          <Opinion target="NULL" polarity="negative" from="0" to="0"/>
        </Opinions>
      </sentence>
    </sentences>
  </Review>
  <Review rid="r2">
    <sentences>
      <sentence id="r2:1">
        <text>the screen was average.</text>
        <Opinions>
          <Opinion target="screen" polarity="neutral" from="4" to="10"/>
        </Opinions>
      </sentence>
    </sentences>
  </Review>
</Reviews>
"""

MALFORMED_FIXTURE = "<sentences><sentence><text>broken"

MISSING_ATTR_FIXTURE = """<sentences>
  <sentence id="1">
    <text>the soup was cold.</text>
    <aspectTerms>
      <aspectTerm term="soup" polarity="negative" from="4"/>
    </aspectTerms>
  </sentence>
</sentences>
"""
