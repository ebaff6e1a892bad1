""" Pluggable detection, classification and segmentation backends. """
