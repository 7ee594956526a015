# Complex JT/PJT vibronic coupling toolkit
