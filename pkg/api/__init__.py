"""
API接口层
"""
