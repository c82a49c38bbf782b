"""Knowledge-base completion toolkit.

Train TuckER, ConvE, and 5*E link-prediction models over open knowledge
bases, with embedding-table or recurrent name encoders, transfer
pre-trained parameters to new KBs, and run behavioural diagnostics on
the result.
"""

__version__ = "0.1.0"
